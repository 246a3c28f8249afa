"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, batching
with normalization and (for CIFAR) crop/flip augmentation.

Also provides a deterministic synthetic digit corpus written in genuine
IDX format, so the full pipeline runs end to end on machines where the
real MNIST files are not available; anything that parses MNIST parses
these files too.
"""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

CORPUS_VERSION = 2  # bump when the renderer changes

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

NORMALIZATION = {
    "mnist": (np.array([0.1307]), np.array([0.3081])),
    "cifar10": (np.array([0.4914, 0.4822, 0.4465]),
                np.array([0.2470, 0.2435, 0.2616])),
}

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class DataFormatError(ValueError):
    """Malformed or truncated dataset file."""


@dataclass
class DataSplit:
    images: np.ndarray  # (N, C, H, W) uint8
    labels: np.ndarray  # (N,) int64

    @property
    def n(self):
        return self.images.shape[0]

    def subset(self, n):
        if n and n < self.n:
            return DataSplit(self.images[:n], self.labels[:n])
        return self


def _open_maybe_gz(path):
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _find(directory, name):
    for candidate in (name, name + ".gz"):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise DataFormatError(f"missing dataset file {name}[.gz] in {directory}")


def read_idx_images(path):
    with _open_maybe_gz(path) as f:
        header = f.read(16)
        if len(header) < 16:
            raise DataFormatError(f"{path}: truncated IDX image header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGE_MAGIC:
            raise DataFormatError(
                f"{path}: bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
        data = f.read(count * rows * cols)
        if len(data) != count * rows * cols:
            raise DataFormatError(f"{path}: truncated image payload "
                                  f"({len(data)} of {count * rows * cols} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(count, 1, rows, cols)


def read_idx_labels(path):
    with _open_maybe_gz(path) as f:
        header = f.read(8)
        if len(header) < 8:
            raise DataFormatError(f"{path}: truncated IDX label header")
        magic, count = struct.unpack(">II", header)
        if magic != LABEL_MAGIC:
            raise DataFormatError(
                f"{path}: bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
        data = f.read(count)
        if len(data) != count:
            raise DataFormatError(f"{path}: truncated label payload")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def write_idx_images(path, images):
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, _, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, labels.size))
        f.write(labels.tobytes())


def _load_mnist(directory):
    train = DataSplit(read_idx_images(_find(directory, MNIST_FILES["train_images"])),
                      read_idx_labels(_find(directory, MNIST_FILES["train_labels"])))
    test = DataSplit(read_idx_images(_find(directory, MNIST_FILES["test_images"])),
                     read_idx_labels(_find(directory, MNIST_FILES["test_labels"])))
    for split in (train, test):
        if split.images.shape[0] != split.labels.shape[0]:
            raise DataFormatError("image/label counts disagree")
    return train, test


def read_cifar_batch(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) == 0 or len(raw) % 3073 != 0:
        raise DataFormatError(f"{path}: size {len(raw)} is not a multiple of "
                              f"3073-byte records")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3073)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DataFormatError(f"{path}: label byte out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def _load_cifar10(directory):
    for sub in ("", "cifar-10-batches-bin"):
        base = os.path.join(directory, sub)
        if os.path.exists(os.path.join(base, "data_batch_1.bin")):
            break
    else:
        raise DataFormatError(f"no CIFAR-10 binary batches under {directory}")
    xs, ys = [], []
    for i in range(1, 6):
        x, y = read_cifar_batch(os.path.join(base, f"data_batch_{i}.bin"))
        xs.append(x)
        ys.append(y)
    train = DataSplit(np.concatenate(xs), np.concatenate(ys))
    test = DataSplit(*read_cifar_batch(os.path.join(base, "test_batch.bin")))
    return train, test


def load_dataset(name, directory):
    """Load (train, test) splits for 'mnist' or 'cifar10'."""
    if name == "mnist":
        return _load_mnist(directory)
    if name == "cifar10":
        return _load_cifar10(directory)
    raise ValueError(f"unknown dataset '{name}' (expected mnist or cifar10)")


class Batcher:
    """Turns a DataSplit into normalized float batches.

    Augmentation (4-pixel-pad random crop plus horizontal flip) is only
    meaningful for CIFAR-style natural images; digit datasets should
    leave it off.
    """

    def __init__(self, split, dataset, dtype=np.float32, augment=False, pad=4):
        self.split = split
        mean, std = NORMALIZATION[dataset]
        self.mean = mean.reshape(1, -1, 1, 1)
        self.std = std.reshape(1, -1, 1, 1)
        self.dtype = np.dtype(dtype)
        self.augment = augment
        self.pad = pad

    @property
    def n(self):
        return self.split.n

    def _normalize(self, raw):
        x = raw.astype(self.dtype) / self.dtype.type(255.0)
        return ((x - self.mean) / self.std).astype(self.dtype)

    def take(self, indices, rng=None):
        raw = self.split.images[indices]
        if self.augment and rng is not None:
            raw = self._augment(raw, rng)
        return self._normalize(raw), self.split.labels[indices]

    def _augment(self, raw, rng):
        n, c, h, w = raw.shape
        padded = np.pad(raw, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        out = np.empty_like(raw)
        offs = rng.integers(0, 2 * self.pad + 1, size=(n, 2))
        flips = rng.random(n) < 0.5
        for i in range(n):
            oy, ox = offs[i]
            crop = padded[i, :, oy:oy + h, ox:ox + w]
            out[i] = crop[:, :, ::-1] if flips[i] else crop
        return out

    def iter(self, batch_size):
        for start in range(0, self.n, batch_size):
            yield self.take(np.arange(start, min(start + batch_size, self.n)))


# ---------------------------------------------------------------------------
# synthetic digit corpus (MNIST-shaped, IDX on disk)

_GLYPHS = [
    "..####..|.#....#.|#......#|#......#|#......#|#......#|.#....#.|..####..",
    "...##...|..###...|.#.#....|...#....|...#....|...#....|...#....|..#####.",
    "..####..|.#....#.|......#.|.....#..|....#...|..##....|.#......|.######.",
    "..####..|.#....#.|......#.|...###..|......#.|......#.|.#....#.|..####..",
    "....##..|...#.#..|..#..#..|.#...#..|########|.....#..|.....#..|.....#..",
    ".######.|.#......|.#......|.#####..|......#.|......#.|.#....#.|..####..",
    "..####..|.#......|#.......|#.####..|##....#.|#......#|.#....#.|..####..",
    ".#######|......#.|.....#..|....#...|....#...|...#....|...#....|..#.....",
    "..####..|.#....#.|.#....#.|..####..|.#....#.|#......#|.#....#.|..####..",
    "..####..|.#....#.|#......#|.#.....#|..######|.......#|......#.|..####..",
]


def _glyph_array(g):
    rows = g.split("|")
    return np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows])


def _render_batch(templates, labels, rng):
    """Random-affine, warped, occluded, noisy 28x28 renders of the glyphs."""
    n = labels.size
    h = w = 28
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    base = np.stack([yy.ravel() - 13.5, xx.ravel() - 13.5])  # (2, 784)
    angle = rng.uniform(-0.45, 0.45, n)
    scale = rng.uniform(0.65, 1.3, n)
    shear = rng.uniform(-0.35, 0.35, n)
    shift = rng.uniform(-3.5, 3.5, (n, 2))
    amp = rng.uniform(0.0, 2.2, (n, 2))
    phase = rng.uniform(0, 2 * np.pi, (n, 2))
    freq = rng.uniform(0.15, 0.5, (n, 2))
    gain = rng.uniform(0.5, 1.0, n)
    noise = rng.normal(0.0, 16.0, (n, h * w))
    # one random thin occluding bar per sample, sometimes absent
    occ_on = rng.random(n) < 0.5
    occ_pos = rng.integers(4, 24, n)
    occ_axis = rng.random(n) < 0.5
    out = np.empty((n, 1, h, w), dtype=np.uint8)
    th, tw = templates.shape[1:]
    for i in range(n):
        ca, sa = np.cos(angle[i]), np.sin(angle[i])
        m = np.array([[ca, -sa], [sa + shear[i], ca]]) / scale[i]
        src = m @ base
        # low-frequency warp bends the strokes
        src = src + np.stack([
            amp[i, 0] * np.sin(freq[i, 0] * base[1] + phase[i, 0]),
            amp[i, 1] * np.sin(freq[i, 1] * base[0] + phase[i, 1])])
        sy = (src[0] + shift[i, 0]) * (th / 22.0) + th / 2 - 0.5
        sx = (src[1] + shift[i, 1]) * (tw / 22.0) + tw / 2 - 0.5
        y0 = np.clip(np.floor(sy).astype(np.int64), 0, th - 2)
        x0 = np.clip(np.floor(sx).astype(np.int64), 0, tw - 2)
        fy = np.clip(sy - y0, 0.0, 1.0)
        fx = np.clip(sx - x0, 0.0, 1.0)
        t = templates[labels[i]]
        val = (t[y0, x0] * (1 - fy) * (1 - fx) + t[y0, x0 + 1] * (1 - fy) * fx
               + t[y0 + 1, x0] * fy * (1 - fx) + t[y0 + 1, x0 + 1] * fy * fx)
        pix = np.clip(val * 255.0 * gain[i] + noise[i], 0, 255).reshape(h, w)
        if occ_on[i]:
            p = occ_pos[i]
            if occ_axis[i]:
                pix[p:p + 2, :] = 0.0
            else:
                pix[:, p:p + 2] = 0.0
        out[i, 0] = pix.astype(np.uint8)
    return out


def make_glyph_templates(upsample=4):
    """Smoothed high-resolution versions of the 10 digit glyphs."""
    tmpl = []
    for g in _GLYPHS:
        a = _glyph_array(g)
        big = np.kron(a, np.ones((upsample, upsample)))
        big = np.pad(big, 2)
        # box-blur twice to soften stroke edges
        for _ in range(2):
            acc = np.zeros_like(big)
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    acc += np.roll(np.roll(big, dy, 0), dx, 1)
            big = acc / 9.0
        tmpl.append(big)
    return np.stack(tmpl)


def generate_digit_corpus(directory, train=60000, test=10000, seed=7):
    """Write a synthetic MNIST-format corpus (IDX files) into `directory`."""
    os.makedirs(directory, exist_ok=True)
    templates = make_glyph_templates()
    rng = np.random.default_rng(seed)
    for split, count, img_name, lbl_name in (
            ("train", train, MNIST_FILES["train_images"], MNIST_FILES["train_labels"]),
            ("test", test, MNIST_FILES["test_images"], MNIST_FILES["test_labels"])):
        labels = rng.integers(0, 10, count)
        chunks = []
        for start in range(0, count, 4096):
            chunks.append(_render_batch(templates, labels[start:start + 4096], rng))
        images = np.concatenate(chunks) if chunks else np.zeros((0, 1, 28, 28), np.uint8)
        write_idx_images(os.path.join(directory, img_name), images)
        write_idx_labels(os.path.join(directory, lbl_name), labels)
    return directory
