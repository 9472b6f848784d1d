import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

DATA = Path(__file__).parent / "data"
MNIST5K = DATA / "mnist5k"


def write_idx(path, array, magic):
    """Independent IDX writer: big-endian magic, big-endian dims, raw bytes."""
    arr = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in arr.shape)
    payload = header + arr.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def write_cifar(path, images, labels, coarse=None):
    """Independent CIFAR writer: label byte(s) then planar R, G, B planes."""
    recs = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        head = bytes([lab]) if coarse is None else bytes([coarse[i], lab])
        recs.append(head + np.transpose(img, (2, 0, 1)).astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(recs))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_small():
    from smt.dataset_io import load_dataset

    train = load_dataset("mnist", "train", MNIST5K)
    test = load_dataset("mnist", "test", MNIST5K)
    return train, test


@pytest.fixture(scope="session")
def fitted_model(mnist_small):
    """A small but complete pipeline fitted on 300 real digits."""
    from smt.representation import PipelineConfig, SMTModel

    train, _ = mnist_small
    cfg = PipelineConfig(K=64, d_emb=8, whiten_samples=50_000, dict_samples=20_000,
                         kmeans_epochs=5, batch_images=64)
    model = SMTModel(cfg)
    stats = None
    model.fit_whitening(train.images[:300], seed=0)
    model.fit_dictionary(train.images[:300], seed=0)
    stats = model.fit_embedding(train.images[:300], seed=0)
    return model, stats


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
