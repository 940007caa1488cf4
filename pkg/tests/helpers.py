"""Small fixtures shared by several test modules."""
import numpy as np

from mcinet import data as D
from mcinet import graph as G
from mcinet.layers import LayerParams


def small_cnn(size=16, seed=0, classes=2):
    """conv(8) -> relu -> pool -> conv(16) -> relu -> pool -> fc."""
    rng = np.random.default_rng(seed)
    g = G.ModelGraph((3, size, size), classes, {"feature_node": "p2"})

    def conv(nid, cin, cout, src):
        w = G.he_uniform(rng, (cout, cin, 3, 3), cin * 9)
        g.add(G.LayerNode(nid, "conv", src, {"stride": 1, "pad": 1}, LayerParams(w, np.zeros(cout))))

    conv("c1", 3, 8, [])
    g.add(G.LayerNode("r1", "relu", ["c1"]))
    g.add(G.LayerNode("p1", "maxpool", ["r1"], {"kernel": 2, "stride": 2, "pad": 0}))
    conv("c2", 8, 16, ["p1"])
    g.add(G.LayerNode("r2", "relu", ["c2"]))
    g.add(G.LayerNode("p2", "maxpool", ["r2"], {"kernel": 2, "stride": 2, "pad": 0}))
    d = 16 * (size // 4) ** 2
    g.add(G.LayerNode("fc", "fc", ["p2"], {"units": classes},
                      LayerParams(G.he_uniform(rng, (classes, d), d), np.zeros(classes))))
    return g


def overfit_set(out_dir, size=16):
    """16 axial slices, 8 per class."""
    m = D.synth_dataset(8, seed=11, out_dir=out_dir, size=32)
    return D.prepare(D.DatasetManifest([r for r in m.records if r.plane == "axial"]), size)
