import numpy as np
import pytest

from mcinet import graph as G
from mcinet import zoo


def conv_p(cin, cout, k):
    return cout * (cin * k * k + 1)


def fc_p(din, dout):
    return dout * (din + 1)


# canonical GoogLeNet inception table, typed independently of the builder:
# (in, 1x1, 3x3 reduce, 3x3, 5x5 reduce, 5x5, pool proj)
GOOGLENET_TABLE = [
    (192, 64, 96, 128, 16, 32, 32),
    (256, 128, 128, 192, 32, 96, 64),
    (480, 192, 96, 208, 16, 48, 64),
    (512, 160, 112, 224, 24, 64, 64),
    (512, 128, 128, 256, 24, 64, 64),
    (512, 112, 144, 288, 32, 64, 64),
    (528, 256, 160, 320, 32, 128, 128),
    (832, 256, 160, 320, 32, 128, 128),
    (832, 384, 192, 384, 48, 128, 128),
]


def alexnet_hand_total(classes=1000):
    return (conv_p(3, 96, 11) + conv_p(96, 256, 5) + conv_p(256, 384, 3) + conv_p(384, 384, 3)
            + conv_p(384, 256, 3) + fc_p(256 * 6 * 6, 4096) + fc_p(4096, 4096) + fc_p(4096, classes))


def googlenet_hand_total(classes=1000):
    total = conv_p(3, 64, 7) + conv_p(64, 64, 1) + conv_p(64, 192, 3)
    for cin, c1, r3, c3, r5, c5, pp in GOOGLENET_TABLE:
        total += (conv_p(cin, c1, 1) + conv_p(cin, r3, 1) + conv_p(r3, c3, 3)
                  + conv_p(cin, r5, 1) + conv_p(r5, c5, 5) + conv_p(cin, pp, 1))
    return total + fc_p(1024, classes)


class TestAlexNet:
    def test_census(self):
        c = G.census(zoo.build_alexnet(1000))
        assert (c.conv, c.fc) == (5, 3)

    def test_parameter_total(self):
        assert alexnet_hand_total() == 62_378_344
        assert G.census(zoo.build_alexnet(1000)).parameters == alexnet_hand_total()

    def test_conv1_shape(self):
        assert G.infer_shapes(zoo.build_alexnet(2))["conv1"] == (96, 55, 55)

    def test_layer_sequence(self):
        kinds = [n.kind for n in zoo.build_alexnet(2).nodes.values()]
        assert kinds == ["conv", "relu", "lrn", "maxpool", "conv", "relu", "lrn", "maxpool",
                         "conv", "relu", "conv", "relu", "conv", "relu", "maxpool",
                         "fc", "relu", "dropout", "fc", "relu", "dropout", "fc"]

    def test_class_count_validation(self):
        with pytest.raises(G.GraphError):
            zoo.build_alexnet(1)

    def test_reduced_input(self):
        shapes = G.infer_shapes(zoo.build_alexnet(2, input_size=64))
        assert shapes["pool5"] == (256, 1, 1)
        assert shapes["fc8"] == (2,)


class TestVGG16:
    def test_census(self):
        c = G.census(zoo.build_vgg16(1000))
        assert (c.conv, c.fc) == (13, 3)
        assert c.parameters == 138_357_544

    def test_pools_halve(self):
        g = zoo.build_vgg16(1000)
        shapes = G.infer_shapes(g)
        pools = [shapes[nid][1] for nid in g.order() if g.nodes[nid].kind == "maxpool"]
        assert pools == [112, 56, 28, 14, 7]

    def test_output_length(self):
        assert G.infer_shapes(zoo.build_vgg16(1000))[zoo.build_vgg16(1000).output_id] == (1000,)

    def test_block_structure(self):
        g = zoo.build_vgg16(10)
        convs = [n for n in g.nodes.values() if n.kind == "conv"]
        assert [c.params.weights.shape[0] for c in convs] == [64] * 2 + [128] * 2 + [256] * 3 + [512] * 6
        assert all(c.params.weights.shape[2:] == (3, 3) and c.geometry["pad"] == 1 for c in convs)


class TestGoogLeNet:
    def test_census(self):
        g = zoo.build_googlenet(1000)
        c = G.census(g)
        assert c.fc == 1
        assert c.conv == 3 + 9 * 6
        assert c.parameters == googlenet_hand_total()

    def test_inception_concat_channels(self):
        g = zoo.build_googlenet(1000)
        shapes = G.infer_shapes(g)
        concats = [n for n in g.nodes.values() if n.kind == "concat"]
        assert len(concats) == 9
        for node in concats:
            assert len(node.inputs) == 4
            assert shapes[node.id][0] == sum(shapes[s][0] for s in node.inputs)

    def test_inception_kernel_sizes(self):
        g = zoo.build_googlenet(1000)
        for name in zoo.INCEPTION:
            ks = {n.params.weights.shape[2] for n in g.nodes.values()
                  if n.kind == "conv" and n.id.startswith(f"inc{name}/")}
            assert ks >= {1, 3, 5}

    def test_gap_before_head(self):
        g = zoo.build_googlenet(1000)
        assert G.infer_shapes(g)["gap"] == (1024,)


class TestResNet18:
    def test_census(self):
        g = zoo.build_resnet18(1000)
        c = G.census(g)
        assert (c.conv, c.fc) == (20, 1)
        # canonical count without conv biases, plus one bias per conv output channel
        bias_terms = 64 + 4 * 64 + (4 * 128 + 128) + (4 * 256 + 256) + (4 * 512 + 512)
        assert c.parameters == 11_689_512 + bias_terms
        assert any("16 conv" in n for n in c.notes)

    def test_terminal_shape(self):
        g = zoo.build_resnet18(5)
        assert G.infer_shapes(g)[g.output_id] == (5,)

    def test_projection_shortcuts(self):
        g = zoo.build_resnet18(2)
        down = sorted(nid for nid in g.nodes if nid.endswith(".downsample"))
        assert down == ["layer2.0.downsample", "layer3.0.downsample", "layer4.0.downsample"]

    def test_zero_branch_identity_block(self):
        g = zoo.build_resnet18(2, input_size=32, width=0.25)
        # zero the second conv and its bn shift so the residual branch outputs 0
        for node in g.nodes.values():
            if node.id.startswith("layer1.") and node.id.endswith("bn2"):
                node.params.bias[:] = 0.0
            if node.id.startswith("layer1.") and node.id.endswith("conv2"):
                node.params.weights[:] = 0.0
                node.params.bias[:] = 0.0
        x = np.random.default_rng(0).standard_normal((2, 3, 32, 32))
        acts, _ = G.forward(g, x, outputs=["maxpool", "layer1.0.relu2"])
        np.testing.assert_array_equal(acts["layer1.0.relu2"], np.maximum(acts["maxpool"], 0.0))


@pytest.mark.parametrize("arch", zoo.ARCHITECTURES)
class TestAllBuilders:
    def test_native_shapes(self, arch):
        g = zoo.build(arch, 1000)
        shapes = G.infer_shapes(g)
        assert g.input_shape == (3, zoo.NATIVE_INPUT[arch], zoo.NATIVE_INPUT[arch])
        assert shapes[g.output_id] == (1000,)

    def test_executed_shapes_match_inferred(self, arch):
        g = zoo.build(arch, 10, input_size=64, width=0.125)
        x = np.random.default_rng(0).standard_normal((2, 3, 64, 64))
        logits, cache = G.forward(g, x, record_shapes=True)
        assert cache.shapes == G.infer_shapes(g)
        assert logits.shape == (2, 10)

    def test_seeded_init(self, arch):
        a = G.named_tensors(zoo.build(arch, 10, input_size=64, width=0.125, seed=1))
        b = G.named_tensors(zoo.build(arch, 10, input_size=64, width=0.125, seed=1))
        c = G.named_tensors(zoo.build(arch, 10, input_size=64, width=0.125, seed=2))
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        assert any(a[k].tobytes() != c[k].tobytes() for k in a if k.endswith(".weight"))

    def test_surgery_composes(self, arch):
        g = zoo.build(arch, 1000, input_size=64, width=0.125)
        G.replace_head(g, 2)
        G.freeze_through(g, g.meta["feature_node"])
        assert g.trainable_ids() <= {n.id for n in g.nodes.values() if n.kind == "fc"}
        assert g.head_id() in g.trainable_ids()
        G.infer_shapes(g)


def test_unknown_architecture():
    with pytest.raises(G.GraphError, match="alexnet"):
        zoo.build("lenet")
