"""Context-aware masking: class-frequency sampling and partition-aware block masks."""
from dataclasses import dataclass

import numpy as np

from .datagen import IGNORE
from .errors import ArgumentError, EmptyDataError, SamplingIndexError


@dataclass(frozen=True)
class ClassFrequencies:
    f: np.ndarray


@dataclass(frozen=True)
class SamplingDistribution:
    fore_classes: tuple
    p_fore: np.ndarray
    back_classes: tuple
    p_back: np.ndarray
    p_fg_branch: float = 0.5

    def class_probabilities(self, K):
        """Marginal probability of drawing each class."""
        p = np.zeros(K)
        p[list(self.fore_classes)] += self.p_fg_branch * self.p_fore
        p[list(self.back_classes)] += (1.0 - self.p_fg_branch) * self.p_back
        return p


@dataclass
class BlockMask:
    H: int
    W: int
    block: int
    keep: np.ndarray  # H x W of {0, 1}

    @property
    def masked_fraction(self):
        return 1.0 - float(self.keep.mean())


def compute_frequencies(dataset, K=None) -> ClassFrequencies:
    """Pixel share of each class over all non-ignore pixels of ``dataset``."""
    if len(dataset) == 0:
        raise EmptyDataError("empty dataset")
    labels = [np.asarray(getattr(im, "labels", im)).ravel() for im in dataset]
    flat = np.concatenate(labels)
    flat = flat[flat != IGNORE]
    if flat.size == 0:
        raise EmptyDataError("dataset has no labeled pixels")
    if K is None:
        K = int(flat.max()) + 1
    counts = np.bincount(flat, minlength=K).astype(np.float64)
    return ClassFrequencies(counts / flat.size)


def _branch_softmax(f, T):
    z = (1.0 - f) / T
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def sampling_distribution(freq, partition, T_b=1.0, T_f=0.7, p_fg_branch=0.5) -> SamplingDistribution:
    """Temperature softmax over ``1 - f_k``, computed separately per branch."""
    if not T_b > 0 or not T_f > 0:
        raise ArgumentError("temperatures must be positive")
    if not 0.0 <= p_fg_branch <= 1.0:
        raise ArgumentError("p_fg_branch must lie in [0, 1]")
    f = np.asarray(getattr(freq, "f", freq), dtype=np.float64)
    fg = tuple(partition.foreground)
    bg = tuple(partition.background)
    return SamplingDistribution(fg, _branch_softmax(f[list(fg)], T_f),
                                bg, _branch_softmax(f[list(bg)], T_b), float(p_fg_branch))


def uniform_distribution(partition, p_fg_branch=0.5) -> SamplingDistribution:
    fg, bg = tuple(partition.foreground), tuple(partition.background)
    return SamplingDistribution(fg, np.full(len(fg), 1.0 / len(fg)),
                                bg, np.full(len(bg), 1.0 / len(bg)), float(p_fg_branch))


def build_class_index(dataset, K, n_min=8):
    """Map each class to the ids of images holding at least ``n_min`` of its pixels."""
    index = {k: [] for k in range(K)}
    for i, im in enumerate(dataset):
        counts = np.bincount(np.asarray(im.labels).ravel(), minlength=IGNORE + 1)
        for k in range(K):
            if counts[k] >= n_min:
                index[k].append(i)
    return {k: np.asarray(v, dtype=np.int64) for k, v in index.items()}


def sample_class(dist: SamplingDistribution, rng):
    if rng.random() < dist.p_fg_branch:
        return dist.fore_classes[int(rng.choice(len(dist.fore_classes), p=dist.p_fore))]
    return dist.back_classes[int(rng.choice(len(dist.back_classes), p=dist.p_back))]


def sample_source_image(dist: SamplingDistribution, index, rng):
    """Draw a branch, then a class, then a uniform image containing that class."""
    k = sample_class(dist, rng)
    candidates = index.get(k)
    if candidates is None or len(candidates) == 0:
        raise SamplingIndexError(k)
    return int(candidates[rng.integers(len(candidates))])


def check_index_coverage(dist: SamplingDistribution, index):
    """Raise for any class with positive draw probability and no candidate image."""
    for classes, probs in ((dist.fore_classes, dist.p_fore), (dist.back_classes, dist.p_back)):
        for k, p in zip(classes, probs):
            if p > 0 and len(index.get(k, ())) == 0:
                raise SamplingIndexError(k)


def make_block_mask(H, W, block, ratio, rng) -> BlockMask:
    """Mask ``ratio`` of the aligned ``block`` x ``block`` tiles, chosen uniformly.

    The tile count ``ratio * n_tiles`` is rounded up with probability equal to
    its fractional part, so every mask is within one tile of the ratio and the
    expected masked fraction is exactly ``ratio``.
    """
    if not 1 <= block <= min(H, W):
        raise ArgumentError(f"block {block} outside [1, {min(H, W)}]")
    if not 0.0 <= ratio <= 1.0:
        raise ArgumentError("ratio must lie in [0, 1]")
    th, tw = -(-H // block), -(-W // block)
    n = th * tw
    target = ratio * n
    count = int(np.floor(target))
    if rng.random() < target - count:
        count += 1
    tiles = np.ones(n, dtype=np.uint8)
    tiles[rng.permutation(n)[:count]] = 0
    tiles = tiles.reshape(th, tw)
    keep = np.repeat(np.repeat(tiles, block, axis=0), block, axis=1)[:H, :W]
    return BlockMask(H, W, block, keep)


def make_random_mask(H, W, ratio, rng) -> BlockMask:
    """Pixel-level mask (block size 1)."""
    return make_block_mask(H, W, 1, ratio, rng)


def make_grid_mask(H, W, block, rng) -> BlockMask:
    """Checkerboard of ``block`` tiles; only the phase is random."""
    if not 1 <= block <= min(H, W):
        raise ArgumentError(f"block {block} outside [1, {min(H, W)}]")
    phase = int(rng.integers(2))
    r = np.arange(H)[:, None] // block
    c = np.arange(W)[None, :] // block
    keep = ((r + c + phase) % 2).astype(np.uint8)
    return BlockMask(H, W, block, keep)


def scaled_block(block, H, reference=64):
    return max(1, int(round(block * H / reference)))


def combine_masked_image(x_t, pseudo, partition, mask_back: BlockMask, mask_fore: BlockMask):
    """Background pixels take the coarse mask, foreground pixels the fine one."""
    x_t = np.asarray(x_t)
    pseudo = np.asarray(pseudo)
    H, W = pseudo.shape
    if x_t.shape[:2] != (H, W) or mask_back.keep.shape != (H, W) or mask_fore.keep.shape != (H, W):
        raise ArgumentError("image, pseudo-label and mask shapes disagree")
    is_bg = partition.is_background(pseudo)
    keep = np.where(is_bg, mask_back.keep, mask_fore.keep)
    if x_t.ndim == 3:
        keep = keep[..., None]
    return (x_t * keep).astype(x_t.dtype)
