"""Convert torchvision's ImageNet VGG-19 into the refsep weights format.

The feature extractor feeds `255 * gamma_encode(x) - mean` with the ImageNet
means (123.68, 116.779, 103.939). torchvision's model expects
`(x / 255 - mu) / sigma`, so the input scaling is folded into conv1_1.
Border pixels differ slightly because zero padding is applied before rather
than after the fold.

    python tools/export_vgg19.py --out weights/vgg19.bin

Writes the weights and `<out>.sha256`.
"""

import argparse
import hashlib
import os
import struct

import torch
import torchvision

LAYERS = [
    "conv1_1", "conv1_2", "conv2_1", "conv2_2",
    "conv3_1", "conv3_2", "conv3_3", "conv3_4",
    "conv4_1", "conv4_2", "conv4_3", "conv4_4",
    "conv5_1", "conv5_2",
]
CONV_INDEX = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30]
CAFFE_MEAN = torch.tensor([123.68, 116.779, 103.939], dtype=torch.float64)
TV_MEAN = torch.tensor([0.485, 0.456, 0.406], dtype=torch.float64)
TV_STD = torch.tensor([0.229, 0.224, 0.225], dtype=torch.float64)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    features = torchvision.models.vgg19(weights=torchvision.models.VGG19_Weights.IMAGENET1K_V1).features
    out = bytearray(b"RSVGG19\0")
    out += struct.pack("<I", len(LAYERS))
    for name, idx in zip(LAYERS, CONV_INDEX):
        w = features[idx].weight.detach().double()
        b = features[idx].bias.detach().double()
        if name == "conv1_1":
            scale = 1.0 / (255.0 * TV_STD)
            shift = (CAFFE_MEAN - 255.0 * TV_MEAN) * scale
            b = b + (w * shift.view(1, 3, 1, 1)).sum(dim=(1, 2, 3))
            w = w * scale.view(1, 3, 1, 1)
        out += struct.pack("<I", len(name)) + name.encode()
        out += struct.pack("<4I", *w.shape)
        out += w.float().numpy().astype("<f4").tobytes() + b.float().numpy().astype("<f4").tobytes()

    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "wb") as f:
        f.write(out)
    digest = hashlib.sha256(out).hexdigest()
    with open(args.out + ".sha256", "w") as f:
        f.write(digest + "\n")
    print(digest)


if __name__ == "__main__":
    main()
