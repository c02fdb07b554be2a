"""Write a 5,000-image MNIST subset as standard IDX files.

The images come from the MNIST sample bundled with the `mlxtend` wheel
(`mlxtend/data/data/mnist_5k.csv.gz`). The sample is sorted by class
(500 per digit), so each class contributes its first 400 images to `train-*` and its last 100 to `t10k-*`; both files are
interleaved round-robin over classes.

    pip download mlxtend --no-deps -d /tmp/mlx
    python python/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist-subset
"""

import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path


def read_rows(wheel):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    rows = []
    for line in io.StringIO(raw.decode()):
        vals = [int(float(v)) for v in line.strip().split(",") if v]
        if vals:
            rows.append(vals)
    return rows


def write_idx(out, name, count, images, labels):
    with open(out / f"{name}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, count, 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(out / f"{name}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, count))
        f.write(bytes(labels))


def main():
    wheel, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    rows = read_rows(wheel)
    assert len(rows) == 5000, len(rows)
    # mlxtend stores 784 pixels followed by the label
    images = [r[:784] for r in rows]
    labels = [r[784] for r in rows]
    assert all(0 <= p <= 255 for img in images for p in img)
    assert all(0 <= l <= 9 for l in labels)
    by_class = {c: [i for i, l in enumerate(labels) if l == c] for c in range(10)}
    assert all(len(v) == 500 for v in by_class.values())
    train = [by_class[c][k] for k in range(400) for c in range(10)]
    test = [by_class[c][400 + k] for k in range(100) for c in range(10)]
    write_idx(out, "train", len(train), [images[i] for i in train], [labels[i] for i in train])
    write_idx(out, "t10k", len(test), [images[i] for i in test], [labels[i] for i in test])


if __name__ == "__main__":
    main()
