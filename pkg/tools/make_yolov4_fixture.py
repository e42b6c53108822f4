"""Generate the YOLOv4 (CSPDarknet53 + SPP + PAN, 80 classes) topology fixture.

Layer list only; follows the darknet ``yolov4.cfg`` layer sequence. Routes with a
single source are folded into the consumer's ``inputs``. Usage::

    python tools/make_yolov4_fixture.py src/blockpunch/fixtures/yolov4.model
"""
import sys

from blockpunch.graph import BranchStructure, LayerSpec, ModelGraph, dumps_model


class Builder:
    def __init__(self, input_shape):
        self.input_shape = input_shape
        self.layers = []
        self.refs = []  # darknet index -> layer id providing that output
        self.channels = []
        self.branches = []

    def _src(self, rel):
        idx = rel if rel >= 0 else len(self.refs) + rel
        return idx, self.refs[idx], self.channels[idx]

    def conv(self, filters, k, stride=1, act="mish", src=-1, aux=2):
        if self.refs:
            _, sid, ch = self._src(src)
            inputs = (sid,)
        else:
            inputs, ch = (), self.input_shape[0]
        lid = f"conv{len(self.refs)}"
        self.layers.append(
            LayerSpec(lid, "conv", filters, ch, (k, k), stride, k // 2, inputs, act, aux)
        )
        self.refs.append(lid)
        self.channels.append(filters)
        return lid

    def route(self, *rels):
        srcs = [self._src(r) for r in rels]
        if len(srcs) == 1:
            self.refs.append(srcs[0][1])
            self.channels.append(srcs[0][2])
            return srcs[0][1]
        lid = f"concat{len(self.refs)}"
        self.layers.append(LayerSpec(lid, "concat", inputs=tuple(s[1] for s in srcs)))
        self.refs.append(lid)
        self.channels.append(sum(s[2] for s in srcs))
        return lid

    def shortcut(self, rel):
        _, other, _ = self._src(rel)
        lid = f"add{len(self.refs)}"
        self.layers.append(LayerSpec(lid, "pointwise-add", inputs=(self.refs[-1], other)))
        self.refs.append(lid)
        self.channels.append(self.channels[-1])
        return lid

    def simple(self, kind, prefix, **kw):
        lid = f"{prefix}{len(self.refs)}"
        self.layers.append(LayerSpec(lid, kind, inputs=(self.refs[-1],), **kw))
        self.refs.append(lid)
        self.channels.append(self.channels[-1])
        return lid


def csp_stage(b, filters, n_res, first=False):
    """Downsample + cross-stage-partial block; records the two-branch structure."""
    b.conv(filters if not first else 64, 3, 2)
    half = filters // 2 if not first else 64
    part1 = b.conv(half, 1)
    b.route(-2)
    start = len(b.layers)
    b.conv(half, 1)
    if first:
        b.conv(32, 1)
        b.conv(64, 3)
        b.shortcut(-3)
    else:
        for _ in range(n_res):
            b.conv(half, 1)
            b.conv(half, 3)
            b.shortcut(-3)
    b.conv(half, 1)
    main = tuple(layer.id for layer in b.layers[start:])
    b.route(-1, -(3 * n_res + 4))
    b.conv(filters if not first else 64, 1)
    return main, (part1,)


def build(input_shape=(3, 320, 320)):
    b = Builder(input_shape)
    b.conv(32, 3)
    stages = [(64, 1, True), (128, 2, False), (256, 8, False), (512, 8, False), (1024, 4, False)]
    marks = {}
    spatial = input_shape[1]
    for i, (filters, n_res, first) in enumerate(stages):
        main, side = csp_stage(b, filters, n_res, first)
        spatial //= 2
        ch = filters // 2 if not first else 64
        # bytes crossing lanes: the side branch's input and output feature maps (f32)
        side_in = (filters if not first else 64) * spatial * spatial * 4
        b.branches.append(
            BranchStructure(
                f"csp{i}", "conv-branches", (main, side), (0, side_in + ch * spatial * spatial * 4)
            )
        )
        marks[filters] = len(b.refs) - 1
    leaky = dict(act="leaky")
    b.conv(512, 1, **leaky)
    b.conv(1024, 3, **leaky)
    spp_in = b.conv(512, 1, **leaky)
    for size in (5, 9, 13):
        b.layers.append(
            LayerSpec(f"maxpool{len(b.refs)}", "maxpool", kernel=(size, size), padding=size // 2,
                      inputs=(spp_in,))
        )
        b.refs.append(b.layers[-1].id)
        b.channels.append(512)
        if size != 13:
            b.route(-2)
    b.route(-1, -3, -5, -6)
    b.conv(512, 1, **leaky)
    b.conv(1024, 3, **leaky)
    b.conv(512, 1, **leaky)
    b.conv(256, 1, **leaky)
    b.simple("upsample", "upsample", stride=2)
    b.route(marks[512])
    b.conv(256, 1, **leaky)
    b.route(-1, -3)
    for f in (256, 512, 256, 512, 256):
        b.conv(f, 1 if f == 256 else 3, **leaky)
    b.conv(128, 1, **leaky)
    b.simple("upsample", "upsample", stride=2)
    b.route(marks[256])
    b.conv(128, 1, **leaky)
    b.route(-1, -3)
    for f in (128, 256, 128, 256, 128):
        b.conv(f, 1 if f == 128 else 3, **leaky)

    heads = []

    def head(filters):
        b.conv(filters, 3, **leaky)
        b.conv(255, 1, act="linear", aux=1)
        ids = (
            b.simple("transpose-reshape", "reshape"),
            b.simple("pointwise-mul", "scale"),
            b.simple("pointwise-add", "offset"),
        )
        heads.append(ids)

    head(256)
    b.route(-6)
    b.conv(256, 3, 2, **leaky)
    b.route(-1, -16 - 2)
    for f in (256, 512, 256, 512, 256):
        b.conv(f, 1 if f == 256 else 3, **leaky)
    head(512)
    b.route(-6)
    b.conv(512, 3, 2, **leaky)
    b.route(-1, -37 - 4)
    for f in (512, 1024, 512, 1024, 512):
        b.conv(f, 1 if f == 512 else 3, **leaky)
    head(1024)
    b.branches.append(BranchStructure("yolo_head", "nonconv-branches", tuple(heads)))
    return ModelGraph(tuple(b.layers), input_shape, tuple(b.branches))


if __name__ == "__main__":
    model = build()
    text = (
        "# YOLOv4 topology (darknet yolov4.cfg, 80 classes, 320x320), layer list only.\n"
        "# Generated by tools/make_yolov4_fixture.py; used for accounting checks.\n"
        + dumps_model(model)
    )
    if len(sys.argv) > 1:
        with open(sys.argv[1], "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
