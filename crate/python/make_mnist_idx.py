"""Convert the digit JSON files shipped with the `mnist` npm package into
gzipped IDX files (images magic 2051, labels magic 2049).

    npm pack mnist && tar xzf mnist-*.tgz
    python python/make_mnist_idx.py package/src/digits data/mnist

Digits are interleaved by class so any prefix is roughly class balanced.
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main(src: Path, out: Path) -> None:
    per_class = []
    for c in range(10):
        with open(src / f"{c}.json") as fh:
            flat = json.load(fh)["data"]
        n = len(flat) // 784
        per_class.append([flat[i * 784:(i + 1) * 784] for i in range(n)])
        print(f"digit {c}: {n} images")

    images, labels = [], []
    for i in range(max(len(p) for p in per_class)):
        for c in range(10):
            if i < len(per_class[c]):
                images.append(per_class[c][i])
                labels.append(c)

    out.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 2051, n, 28, 28))
        fh.write(bytes(min(255, max(0, round(v * 255))) for img in images for v in img))
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 2049, n))
        fh.write(bytes(labels))
    print(f"wrote {n} images to {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
