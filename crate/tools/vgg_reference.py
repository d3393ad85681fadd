"""Reference VGG-19 activations for the Rust feature extractor.

Rebuilds the deterministic stand-in weights with numpy, runs torchvision's
VGG-19 in float64 on a pinned 224x224 image and writes sampled tap values
to crates/core/tests/fixtures/vgg_reference.json.
"""

import argparse
import hashlib
import json
import struct

import numpy as np
import torch
import torchvision

LAYERS = [
    ("conv1_1", 3, 64), ("conv1_2", 64, 64),
    ("conv2_1", 64, 128), ("conv2_2", 128, 128),
    ("conv3_1", 128, 256), ("conv3_2", 256, 256), ("conv3_3", 256, 256), ("conv3_4", 256, 256),
    ("conv4_1", 256, 512), ("conv4_2", 512, 512), ("conv4_3", 512, 512), ("conv4_4", 512, 512),
    ("conv5_1", 512, 512), ("conv5_2", 512, 512),
]
# Indices into torchvision's vgg19().features.
CONV_INDEX = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30]
TAPS = {"conv1_2": 3, "conv2_2": 8, "conv3_2": 13, "conv4_2": 22, "conv5_2": 31}
MEAN = [123.68, 116.779, 103.939]
STANDIN_SEED = 0x5647473139
M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def splitmix(z):
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def standin_layer(seed, layer, cin, cout):
    base = splitmix(np.uint64(seed) ^ np.uint64(0x1000 + layer))
    n = cout * cin * 9
    with np.errstate(over="ignore"):
        z = splitmix(base + np.arange(n + cout, dtype=np.uint64))
    unit = (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)
    bound = np.sqrt(6.0 / (cin * 9))
    weight = ((2.0 * unit[:n] - 1.0) * bound).astype(np.float32).reshape(cout, cin, 3, 3)
    bias = (0.01 + 0.04 * unit[n:]).astype(np.float32)
    return weight, bias


def serialize(layers):
    out = bytearray(b"RSVGG19\0")
    out += struct.pack("<I", len(layers))
    for (name, _, _), (w, b) in zip(LAYERS, layers):
        out += struct.pack("<I", len(name)) + name.encode()
        out += struct.pack("<4I", *w.shape)
        out += w.astype("<f4").tobytes() + b.astype("<f4").tobytes()
    return bytes(out)


def pinned_image(h, w):
    y, x = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    planes = []
    for c in range(3):
        s = np.sin(0.071 * x + 0.113 * y + 1.3 * c) * np.cos(0.037 * x - 0.052 * y + 0.7 * c)
        planes.append(0.05 + 0.9 * (s + 1.0) / 2.0)
    return np.stack(planes)


def sample_positions(shape, count):
    c, h, w = shape
    return [((i * 37) % c, (i * 53 + i // 7) % h, (i * 29 + i // 3) % w) for i in range(count)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="crates/core/tests/fixtures/vgg_reference.json")
    args = ap.parse_args()

    layers = [standin_layer(STANDIN_SEED, i, cin, cout) for i, (_, cin, cout) in enumerate(LAYERS)]
    digest = hashlib.sha256(serialize(layers)).hexdigest()

    net = torchvision.models.vgg19(weights=None).features.double().eval()
    with torch.no_grad():
        for idx, (w, b) in zip(CONV_INDEX, layers):
            net[idx].weight.copy_(torch.from_numpy(w.astype(np.float64)))
            net[idx].bias.copy_(torch.from_numpy(b.astype(np.float64)))

    image = pinned_image(224, 224)
    pre = 255.0 * image ** (1.0 / 2.2) - np.array(MEAN).reshape(3, 1, 1)
    x = torch.from_numpy(pre)[None]
    taps = {}
    with torch.no_grad():
        for i, layer in enumerate(net[:32]):
            x = layer(x)
            for name, idx in TAPS.items():
                if idx == i:
                    taps[name] = x[0].numpy()

    out = {"standin_sha256": digest, "image": "pinned_image(224, 224)", "taps": []}
    for name in TAPS:
        a = taps[name]
        count = 4096 if name == "conv1_2" else 512
        out["taps"].append({
            "name": name,
            "shape": list(a.shape),
            "channel_means": a.mean(axis=(1, 2)).tolist(),
            "samples": [[c, y, x, float(a[c, y, x])] for c, y, x in sample_positions(a.shape, count)],
        })
    with open(args.out, "w") as f:
        json.dump(out, f)
    print(digest, {k: (v.shape, float(v.mean()), float(v.max())) for k, v in taps.items()})


if __name__ == "__main__":
    main()
