#!/usr/bin/env python3
"""Convert torchvision VGG16-BN weights into the encoder checkpoint format.

    python scripts/convert_vgg16_bn.py weights/vgg16_bn_features.ckpt
    python scripts/convert_vgg16_bn.py out.ckpt --state-dict vgg16_bn-6c64b313.pth

Without --state-dict the script asks torchvision for its ImageNet weights,
which needs network access or a populated torch hub cache. --random writes a
randomly initialized network instead (useful for checking the pipeline).

--check-dir writes a test image and the reference 32x32x512 feature grid
(little-endian f32, cell-major) computed by PyTorch, for comparison with
the Rust encoder.
"""

import argparse
import json
import struct
from pathlib import Path

import numpy as np
import torch
import torchvision

MAGIC = b"MSNCKPT\0"
FORMAT_VERSION = 1
KIND = "vgg16_bn_features_26"
LAYERS = 26
MEAN = [0.485, 0.456, 0.406]
STD = [0.229, 0.224, 0.225]


def load_model(args):
    if args.random:
        torch.manual_seed(args.seed)
        model = torchvision.models.vgg16_bn(weights=None)
        for m in model.features:
            if isinstance(m, torch.nn.BatchNorm2d):
                torch.nn.init.uniform_(m.weight, 0.5, 1.5)
                torch.nn.init.normal_(m.bias, 0.0, 0.1)
                m.running_mean.normal_(0.0, 0.1)
                m.running_var.uniform_(0.5, 2.0)
        return model
    model = torchvision.models.vgg16_bn(weights=None)
    if args.state_dict:
        model.load_state_dict(torch.load(args.state_dict, map_location="cpu"))
    else:
        weights = torchvision.models.VGG16_BN_Weights.IMAGENET1K_V1
        model.load_state_dict(weights.get_state_dict(progress=True))
    return model


def write_checkpoint(path, features, source):
    tensors = []
    for name, value in features.state_dict().items():
        index = int(name.split(".")[0])
        if index >= LAYERS or name.endswith("num_batches_tracked"):
            continue
        tensors.append((f"features.{name}", value.detach().float().contiguous().numpy().ravel()))
    header = {
        "kind": KIND,
        "metadata": {"preprocess": {"mean": MEAN, "std": STD}, "source": source},
        "tensors": [{"name": n, "dtype": "f32", "len": int(v.size)} for n, v in tensors],
    }
    blob = json.dumps(header).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, v in tensors:
            f.write(v.astype("<f4").tobytes())
    return len(tensors)


def write_check(dir_, features):
    from PIL import Image

    dir_.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:256, 0:256] / 255.0
    img = np.stack([xx, yy, 0.5 + 0.5 * np.sin(12 * xx * yy)], axis=-1)
    img = np.clip(img + 0.1 * rng.standard_normal(img.shape), 0, 1)
    rgb8 = (img * 255).round().astype(np.uint8)
    Image.fromarray(rgb8).save(dir_ / "input.png")
    x = torch.from_numpy(rgb8.astype(np.float32) / 255.0).permute(2, 0, 1)
    x = (x - torch.tensor(MEAN)[:, None, None]) / torch.tensor(STD)[:, None, None]
    with torch.no_grad():
        out = features(x[None])[0]
    cells = out.permute(1, 2, 0).contiguous().numpy()
    cells.astype("<f4").tofile(dir_ / "features.f32")
    return cells.shape


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("out", type=Path)
    p.add_argument("--state-dict", type=Path)
    p.add_argument("--random", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--check-dir", type=Path)
    args = p.parse_args()

    model = load_model(args)
    features = model.features[:LAYERS].eval()
    source = {"random_init": {"seed": args.seed}} if args.random else {"checkpoint": str(args.out)}
    n = write_checkpoint(args.out, features, source)
    print(f"wrote {n} tensors to {args.out}")
    if args.check_dir:
        shape = write_check(args.check_dir, features)
        print(f"wrote reference features {shape} to {args.check_dir}")


if __name__ == "__main__":
    main()
