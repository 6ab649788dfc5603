#!/usr/bin/env python3
"""Write the 5000-image MNIST subset shipped with mlxtend as a gzipped IDX file.

Usage: python3 scripts/mnist_subset_to_idx.py [path/to/mlxtend.whl] [out.gz]

Without a wheel argument, `pip download mlxtend --no-deps` is run into a
temporary directory first.
"""
import gzip
import os
import struct
import subprocess
import sys
import tempfile
import zipfile

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def find_wheel(argv):
    if len(argv) > 1 and argv[1].endswith(".whl"):
        return argv[1]
    tmp = tempfile.mkdtemp()
    subprocess.check_call(
        [sys.executable, "-m", "pip", "download", "mlxtend", "--no-deps", "-d", tmp]
    )
    return next(os.path.join(tmp, f) for f in os.listdir(tmp) if f.endswith(".whl"))


def main(argv):
    wheel = find_wheel(argv)
    out = argv[2] if len(argv) > 2 else "data/mnist-5k-images-idx3-ubyte.gz"
    text = gzip.decompress(zipfile.ZipFile(wheel).read(CSV_MEMBER)).decode()
    pixels = bytearray()
    count = 0
    for line in text.splitlines():
        fields = line.split(",")
        # 784 pixels followed by the label
        pixels.extend(int(float(v)) for v in fields[:784])
        count += 1
    header = struct.pack(">IIII", 0x00000803, count, 28, 28)
    with gzip.GzipFile(out, "wb", mtime=0) as f:
        f.write(header + bytes(pixels))
    print(f"wrote {count} images to {out}")


if __name__ == "__main__":
    main(sys.argv)
