#!/usr/bin/env python3
"""Regenerate the committed test fixtures under fixtures/.

Produces a synthetic 10-class digit dataset (IDX), a handful of small
sequential CNNs trained on it (PSB1), and golden logit fixtures (JSON).
Every strided op is written as a stride-1 op followed by an explicit
phase gather so both implementations agree on the decomposition.

Requires numpy, Pillow, matplotlib (for its bundled fonts) and torch.
Deterministic for a given --seed list; run from the workspace root:

    python3 tools/make_fixtures.py --out fixtures
"""

import argparse
import json
import os
import struct

import matplotlib
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw, ImageFont

SIZE = 32
CANVAS = 64
SHIFT = 6

FONT_DIR = os.path.join(os.path.dirname(matplotlib.__file__), "mpl-data", "fonts", "ttf")
FONT_FILES = [
    "DejaVuSans.ttf",
    "DejaVuSans-Bold.ttf",
    "DejaVuSerif.ttf",
    "DejaVuSerif-Bold.ttf",
    "DejaVuSansMono.ttf",
    "DejaVuSans-Oblique.ttf",
    "DejaVuSerif-Italic.ttf",
    "cmr10.ttf",
    "cmss10.ttf",
    "cmtt10.ttf",
    "STIXGeneral.ttf",
    "STIXGeneralItalic.ttf",
    "STIXGeneralBol.ttf",
]


# ---------------------------------------------------------------- data

def render_digit(rng, digit, fonts):
    font_path = fonts[rng.integers(len(fonts))]
    size = int(rng.integers(44, 58))
    font = ImageFont.truetype(font_path, size)
    img = Image.new("L", (CANVAS, CANVAS), 0)
    draw = ImageDraw.Draw(img)
    text = str(digit)
    l, t, r, b = draw.textbbox((0, 0), text, font=font)
    x = (CANVAS - (r - l)) / 2 - l
    y = (CANVAS - (b - t)) / 2 - t
    stroke = int(rng.integers(1, 4))
    draw.text((x, y), text, fill=255, font=font, stroke_width=stroke, stroke_fill=255)

    # random affine about the canvas centre
    angle = np.deg2rad(rng.uniform(-15, 15))
    shear = rng.uniform(-0.25, 0.25)
    scale = rng.uniform(0.85, 1.1)
    tx, ty = rng.uniform(-6, 6, size=2)
    cos, sin = np.cos(angle), np.sin(angle)
    fwd = np.array([[cos, -sin], [sin, cos]]) @ np.array([[1.0, shear], [0.0, 1.0]]) * scale
    inv = np.linalg.inv(fwd)
    c = CANVAS / 2
    off = np.array([c, c]) - inv @ np.array([c + tx, c + ty])
    img = img.transform(
        (CANVAS, CANVAS),
        Image.AFFINE,
        (inv[0, 0], inv[0, 1], off[0], inv[1, 0], inv[1, 1], off[1]),
        resample=Image.BILINEAR,
    )
    img = img.resize((SIZE, SIZE), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0

    # clutter: a stray stroke and pixel noise
    if rng.random() < 0.5:
        clutter = Image.new("L", (SIZE, SIZE), 0)
        d = ImageDraw.Draw(clutter)
        p = rng.uniform(0, SIZE, size=4)
        d.line([(p[0], p[1]), (p[2], p[3])], fill=int(rng.integers(60, 200)), width=1)
        arr = np.maximum(arr, np.asarray(clutter, dtype=np.float32) / 255.0)
    arr = arr * rng.uniform(0.6, 1.0) + rng.normal(0.0, rng.uniform(0.02, 0.12), size=arr.shape)
    arr = np.clip(arr, 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8)


def make_split(seed, count):
    rng = np.random.default_rng(seed)
    fonts = [os.path.join(FONT_DIR, f) for f in FONT_FILES]
    labels = rng.integers(0, 10, size=count).astype(np.uint8)
    images = np.stack([render_digit(rng, int(d), fonts) for d in labels])
    return images, labels


def write_idx_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------- model

# (name, kind, params); conv entries carry (c_in, c_out, k)
PLAN = [
    ("conv1", "conv2d", {"pad": 1}, (1, 8, 3)),
    ("relu1", "relu", {}, None),
    ("pool1", "sliding_max", {"k": 2}, None),
    ("sub1", "subsample", {"rate_h": 2, "rate_w": 2}, None),
    ("conv2", "conv2d", {"pad": 1}, (8, 16, 3)),
    ("sub2", "subsample", {"rate_h": 2, "rate_w": 2}, None),
    ("relu2", "relu", {}, None),
    ("conv3", "conv2d", {"pad": 1}, (16, 32, 3)),
    ("sub3", "subsample", {"rate_h": 2, "rate_w": 2}, None),
    ("relu3", "relu", {}, None),
    ("conv4", "conv2d", {"pad": 1}, (32, 32, 3)),
    ("relu4", "relu", {}, None),
    ("pool4", "sliding_max", {"k": 2}, None),
    ("sub4", "subsample", {"rate_h": 2, "rate_w": 2}, None),
    ("gap", "global_avg_pool", {}, None),
    ("fc", "dense", {}, (32, 10)),
]
HEAD_INDEX = 14


def subsample(x, rate_h, rate_w, s_h, s_w):
    h, w = x.shape[-2], x.shape[-1]
    oh, ow = h // rate_h, w // rate_w
    rows = torch.clamp(torch.arange(oh) * rate_h + s_h, max=h - 1)
    cols = torch.clamp(torch.arange(ow) * rate_w + s_w, max=w - 1)
    return x[..., rows, :][..., cols]


def sliding_max(x, k):
    x = F.pad(x, (0, k - 1, 0, k - 1), mode="replicate")
    return F.max_pool2d(x, k, stride=1)


class ToyNet(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.params = torch.nn.ParameterDict()
        for name, kind, _, dims in PLAN:
            if kind == "conv2d":
                cin, cout, k = dims
                conv = torch.nn.Conv2d(cin, cout, k)
                self.params[name + "_w"] = conv.weight
                self.params[name + "_b"] = conv.bias
            elif kind == "dense":
                d, k = dims
                lin = torch.nn.Linear(d, k)
                self.params[name + "_w"] = lin.weight
                self.params[name + "_b"] = lin.bias

    def forward(self, x, selection=None):
        layer = 0
        for name, kind, params, _ in PLAN:
            if kind == "conv2d":
                x = F.conv2d(x, self.params[name + "_w"], self.params[name + "_b"], padding=params["pad"])
            elif kind == "relu":
                x = F.relu(x)
            elif kind == "sliding_max":
                x = sliding_max(x, params["k"])
            elif kind == "subsample":
                s = selection[layer] if selection is not None else (0, 0)
                x = subsample(x, params["rate_h"], params["rate_w"], s[0], s[1])
                layer += 1
            elif kind == "global_avg_pool":
                x = x.mean(dim=(-2, -1))
            elif kind == "dense":
                x = F.linear(x, self.params[name + "_w"], self.params[name + "_b"])
        return x


def random_shift(x, rng, max_shift=SHIFT):
    """Translate each image by up to max_shift pixels, zero filled."""
    padded = F.pad(x, (max_shift,) * 4)
    out = torch.empty_like(x)
    for j, (dy, dx) in enumerate(rng.integers(0, 2 * max_shift + 1, size=(len(x), 2))):
        out[j] = padded[j, :, dy:dy + SIZE, dx:dx + SIZE]
    return out


def train_model(seed, x_train, y_train, x_test, y_test, epochs):
    torch.manual_seed(seed)
    np_rng = np.random.default_rng(seed)
    net = ToyNet()
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    steps = epochs * ((len(x_train) + 63) // 64)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
    for _ in range(epochs):
        order = np_rng.permutation(len(x_train))
        for i in range(0, len(order), 64):
            idx = torch.from_numpy(order[i:i + 64])
            loss = F.cross_entropy(net(random_shift(x_train[idx], np_rng)), y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    with torch.no_grad():
        acc = (net(x_test).argmax(1) == y_test).float().mean().item() * 100
    return net, acc


def export_psb(net, path, name):
    layers = []
    blobs = []
    offset = 0

    def tensor_ref(t):
        nonlocal offset
        arr = t.detach().numpy().astype("<f4")
        ref = {"offset": offset, "shape": list(arr.shape)}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
        return ref

    for lname, kind, params, _ in PLAN:
        entry = {"kind": kind, "name": lname, "params": dict(params)}
        if kind in ("conv2d", "dense"):
            entry["weight"] = tensor_ref(net.params[lname + "_w"])
            entry["bias"] = tensor_ref(net.params[lname + "_b"])
        layers.append(entry)
    header = {
        "kind": "model",
        "layers": layers,
        "meta": {"head_index": HEAD_INDEX, "input_shape": [1, SIZE, SIZE], "name": name, "num_classes": 10},
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(b"PSB1")
        f.write(struct.pack("<II", 1, len(text)))
        f.write(text)
        for b in blobs:
            f.write(b)


def load_psb(path, net):
    with open(path, "rb") as f:
        data = f.read()
    assert data[:4] == b"PSB1"
    version, hlen = struct.unpack("<II", data[4:12])
    header = json.loads(data[12:12 + hlen])
    blob = data[12 + hlen:]

    def read(ref):
        n = int(np.prod(ref["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=ref["offset"])
        return torch.from_numpy(arr.copy().reshape(ref["shape"]))

    with torch.no_grad():
        for entry in header["layers"]:
            if "weight" in entry:
                net.params[entry["name"] + "_w"].copy_(read(entry["weight"]))
                net.params[entry["name"] + "_b"].copy_(read(entry["bias"]))
    return net


def reference_logits(net, x, selection):
    """Forward pass in float64, rounded to float32 after every layer.

    Each layer's output is then the correctly rounded float32 of an exact
    computation on float32 inputs, which any implementation accumulating
    in double precision reproduces bit for bit.
    """
    r = lambda t: t.float().double()
    x = x.double()
    layer = 0
    for name, kind, params, _ in PLAN:
        if kind == "conv2d":
            w, b = net.params[name + "_w"].double(), net.params[name + "_b"].double()
            x = r(F.conv2d(x, w, b, padding=params["pad"]))
        elif kind == "relu":
            x = F.relu(x)
        elif kind == "sliding_max":
            x = sliding_max(x, params["k"])
        elif kind == "subsample":
            s = selection[layer]
            x = subsample(x, params["rate_h"], params["rate_w"], s[0], s[1])
            layer += 1
        elif kind == "global_avg_pool":
            x = r(x.mean(dim=(-2, -1)))
        elif kind == "dense":
            w, b = net.params[name + "_w"].double(), net.params[name + "_b"].double()
            x = r(F.linear(x, w, b))
    return x.float()


def emit_goldens(net, x, image_file, indices, selections, path):
    out = []
    with torch.no_grad():
        for i in indices:
            for sel in selections:
                logits = reference_logits(net, x[i:i + 1], sel)[0]
                out.append({
                    "input": f"{image_file}#{i}",
                    "logits": [float(v) for v in logits.numpy()],
                    "selection": [list(p) for p in sel],
                    "tol": 1e-6 if all(p == (0, 0) for p in sel) else 1e-4,
                })
    with open(path, "w") as f:
        json.dump(out, f, indent=1)
        f.write("\n")


def all_states(n_layers, rate=2):
    phases = [(a, b) for a in range(rate) for b in range(rate)]
    states = [[]]
    for _ in range(n_layers):
        states = [s + [p] for s in states for p in phases]
    return [tuple(s) for s in states]


def write_goldens(net, x_test, out_dir):
    zero = ((0, 0),) * 4
    singles = []
    for layer in range(4):
        for p in [(0, 1), (1, 0), (1, 1)]:
            sel = list(zero)
            sel[layer] = p
            singles.append(tuple(sel))
    rng = np.random.default_rng(7)
    deep = [tuple((int(a), int(b)) for a, b in rng.integers(0, 2, size=(4, 2))) for _ in range(5)]
    emit_goldens(net, x_test, "digits-test-images.idx", range(8), [zero] + singles + deep,
                 os.path.join(out_dir, "golden-toy-s0.json"))
    emit_goldens(net, x_test, "digits-test-images.idx", range(2), all_states(4),
                 os.path.join(out_dir, "golden-toy-s0-all.json"))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="fixtures")
    ap.add_argument("--train", type=int, default=12000)
    ap.add_argument("--agg-train", type=int, default=2000,
                    help="size of the held-out split used to train the aggregator")
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=14)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--goldens-only", action="store_true",
                    help="re-emit golden fixtures from an existing toy-s0.psb")
    args = ap.parse_args()
    torch.set_num_threads(1)
    os.makedirs(args.out, exist_ok=True)

    if args.goldens_only:
        with open(os.path.join(args.out, "digits-test-images.idx"), "rb") as f:
            raw = f.read()
        _, n, rows, cols = struct.unpack(">IIII", raw[:16])
        xte = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)
        x_test = torch.from_numpy(xte.astype(np.float32) / 255.0).unsqueeze(1)
        net = load_psb(os.path.join(args.out, "toy-s0.psb"), ToyNet())
        write_goldens(net, x_test, args.out)
        return

    xtr, ytr = make_split(1000, args.train)
    xte, yte = make_split(2000, args.test)
    # the aggregator trains on images the backbones never saw
    xag, yag = make_split(3000, args.agg_train)
    write_idx_images(os.path.join(args.out, "digits-train-images.idx"), xag)
    write_idx_labels(os.path.join(args.out, "digits-train-labels.idx"), yag)
    write_idx_images(os.path.join(args.out, "digits-test-images.idx"), xte)
    write_idx_labels(os.path.join(args.out, "digits-test-labels.idx"), yte)

    to_t = lambda a: torch.from_numpy(a.astype(np.float32) / 255.0).unsqueeze(1)
    x_train, y_train = to_t(xtr), torch.from_numpy(ytr.astype(np.int64))
    x_test, y_test = to_t(xte), torch.from_numpy(yte.astype(np.int64))

    report = {}
    for seed in [int(s) for s in args.seeds.split(",")]:
        net, acc = train_model(seed, x_train, y_train, x_test, y_test, args.epochs)
        report[f"toy-s{seed}"] = round(acc, 2)
        print(f"seed {seed}: test top-1 {acc:.2f}%", flush=True)
        export_psb(net, os.path.join(args.out, f"toy-s{seed}.psb"), f"toy-s{seed}")
        if seed == 0:
            write_goldens(net, x_test, args.out)
    with open(os.path.join(args.out, "baseline.json"), "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")


if __name__ == "__main__":
    main()
