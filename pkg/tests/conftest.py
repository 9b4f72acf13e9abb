import pytest

from udpfl.data import MNIST_FILES, mnist_dir


def mnist_present() -> bool:
    d = mnist_dir()
    return all((d / name).exists() for name in MNIST_FILES)


requires_mnist = pytest.mark.skipif(
    not mnist_present(),
    reason="MNIST IDX files not found (set MNIST_DIR or run the fetch-mnist command)",
)
