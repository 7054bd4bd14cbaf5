"""Write MNIST IDX files from the digits bundled with mlxtend.

usage: python scripts/make_mnist_idx.py [DEST]   (default: data/mnist)
"""

import sys

from onenet.datasets import export_bundled_mnist

if __name__ == "__main__":
    dest = sys.argv[1] if len(sys.argv) > 1 else "data/mnist"
    for split, (images, labels) in export_bundled_mnist(dest).items():
        print(f"{split}: {images} {labels}")
