"""Export the MNIST-1D dataset (upstream `mnist1d` package) to the BIN format
read by `fwdguess --data`.

    pip install mnist1d
    python scripts/export_mnist1d.py data/

Layout: 8-byte magic b"MNIST1D\\0", u32 count, u32 feature dim, then per
sample one u8 label followed by the features as little-endian f32.
"""
import struct
import sys
from pathlib import Path

import numpy as np
from mnist1d.data import get_dataset_args, make_dataset


def write_bin(path, x, y):
    x = np.asarray(x, dtype="<f4")
    y = np.asarray(y, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(b"MNIST1D\0")
        f.write(struct.pack("<II", x.shape[0], x.shape[1]))
        for label, row in zip(y, x):
            f.write(struct.pack("<B", int(label)))
            f.write(row.tobytes())


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "data")
    out.mkdir(parents=True, exist_ok=True)
    data = make_dataset(get_dataset_args())
    write_bin(out / "mnist1d_train.bin", data["x"], data["y"])
    write_bin(out / "mnist1d_test.bin", data["x_test"], data["y_test"])
    print(f"train {data['x'].shape} test {data['x_test'].shape} -> {out}")


if __name__ == "__main__":
    main()
