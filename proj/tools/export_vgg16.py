#!/usr/bin/env python3
"""Convert torchvision VGG16 ImageNet weights into a pavecrack weights archive.

Writes <cache>/vgg16_imagenet.pcw and records its SHA-256 in <cache>/weights.lock,
which is where the VGG16 backbone is resolved from (PAVECRACK_CACHE, else ~/.cache/pavecrack).
"""

import argparse
import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch
import torchvision

WIDTHS = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512]
POOL_AFTER = {1, 3, 6, 9, 12}
ARCHIVE = "vgg16_imagenet.pcw"
SOURCE_URI = "https://download.pytorch.org/models/vgg16-397923af.pth"


def default_cache():
    if os.environ.get("PAVECRACK_CACHE"):
        return Path(os.environ["PAVECRACK_CACHE"])
    return Path.home() / ".cache" / "pavecrack"


def archive_bytes(features):
    convs = [m for m in features if isinstance(m, torch.nn.Conv2d)]
    assert len(convs) == 13, "expected 13 conv layers"
    units, tensors = [], []
    in_c = 3
    for i, conv in enumerate(convs):
        name = f"features.{i}"
        assert conv.in_channels == in_c and conv.out_channels == WIDTHS[i]
        units.append({"name": name, "in": in_c, "out": WIDTHS[i], "kernel": 3,
                      "batch_norm": False, "pool": i in POOL_AFTER})
        # OIHW matches the engine's weight layout.
        tensors.append((name + ".weight", conv.weight.detach().numpy()))
        tensors.append((name + ".bias", conv.bias.detach().numpy()))
        in_c = WIDTHS[i]
    header = {
        "format": "pavecrack-weights",
        "version": 1,
        "backbone": "VGG16",
        "input_side": 224,
        "preprocessing": {"bgr": False, "mean": [123.675, 116.28, 103.53], "std": [58.395, 57.12, 57.375]},
        "units": units,
        "tensors": [{"name": n, "count": int(t.size)} for n, t in tensors],
        "attributes": {"exported_from": "torchvision.models.vgg16"},
    }
    text = json.dumps(header).encode()
    blob = bytearray(b"PCWA" + struct.pack("<I", len(text)) + text)
    for _, t in tensors:
        blob += np.ascontiguousarray(t, dtype="<f4").tobytes()
    return bytes(blob)


def update_lock(lock_path, digest, uri):
    kept = []
    if lock_path.exists():
        for line in lock_path.read_text().splitlines():
            if line and not line.startswith("#") and line.split()[0] != "VGG16":
                kept.append(line)
    kept.append(f"VGG16\t{uri}\t{digest}")
    lock_path.write_text("# name\tsource_uri\tsha256\n" + "\n".join(kept) + "\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache", type=Path, default=default_cache(), help="weights cache directory")
    ap.add_argument("--state-dict", type=Path, help="local torchvision VGG16 state dict instead of downloading")
    ap.add_argument("--random-init", action="store_true", help="export untrained weights (format testing only)")
    args = ap.parse_args()

    if args.random_init:
        model, uri = torchvision.models.vgg16(weights=None), "random-init"
    elif args.state_dict:
        model = torchvision.models.vgg16(weights=None)
        model.load_state_dict(torch.load(args.state_dict, map_location="cpu"))
        uri = args.state_dict.resolve().as_uri()
    else:
        model, uri = torchvision.models.vgg16(weights="IMAGENET1K_V1"), SOURCE_URI

    data = archive_bytes(model.features)
    args.cache.mkdir(parents=True, exist_ok=True)
    (args.cache / ARCHIVE).write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    update_lock(args.cache / "weights.lock", digest, uri)
    print(f"wrote {args.cache / ARCHIVE} ({len(data) >> 20} MiB, sha256 {digest})")


if __name__ == "__main__":
    main()
