"""Question and image tokenizers.

Words: a plain word-level vocabulary built from the training questions
(lowercase, punctuation stripped, whitespace split).  Ids 0 and 1 are
reserved for padding and unknown words.

Images: two interchangeable desk-scale backends that both emit g*g vision
tokens of width token_dim:

* ``cnn_lite``  - three conv stages: a frozen color/edge filter bank (the
  desk-scale stand-in for a pretrained backbone's early layers), a learned
  residual pair, and a final conv whose kernel/stride collapse the feature
  map to exactly g*g positions.
* ``vit_lite``  - non-overlapping patches, flattened and linearly
  projected, optionally plus a learned per-patch position table
  (``vit_internal_pose``), which deliberately duplicates the position
  information the sequence-level pose table can also supply.

Both are deterministic functions of (image, params); all learned state
lives in the params dict so the model owns initialization and updates.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ConfigError, DataError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def _words(text: str) -> list:
    return text.lower().translate(_PUNCT_TABLE).split()


@dataclass
class Vocabulary:
    """Bidirectional token/id map with PAD=0 and UNK=1 fixed."""

    token_to_id: dict
    id_to_token: list

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id_for(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def to_lines(self) -> list:
        # One token per line, line number = id; reserved rows included.
        return list(self.id_to_token)

    @classmethod
    def from_lines(cls, lines) -> "Vocabulary":
        id_to_token = list(lines)
        if len(id_to_token) < 2 or id_to_token[0] != PAD_TOKEN or id_to_token[1] != UNK_TOKEN:
            raise ValueError("vocabulary lines must start with the PAD and UNK rows")
        return cls({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def build_vocab(corpus, min_count: int = 1) -> Vocabulary:
    """Build a Vocabulary from an iterable of question strings.

    Ids are assigned by descending frequency, ties broken lexicographically,
    so two builds over the same corpus agree exactly.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("build_vocab: empty corpus")
    counts = Counter()
    for q in corpus:
        counts.update(_words(q))
    if not counts:
        raise ValueError("build_vocab: empty corpus (no words found)")
    kept = sorted(
        (w for w, c in counts.items() if c >= min_count),
        key=lambda w: (-counts[w], w),
    )
    id_to_token = [PAD_TOKEN, UNK_TOKEN] + kept
    return Vocabulary({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def tokenize_question(q: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    """Map a question to exactly ``max_len`` ids: truncate, then right-pad."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [vocab.id_for(w) for w in _words(q)][:max_len]
    ids.extend([PAD_ID] * (max_len - len(ids)))
    return np.asarray(ids, dtype=np.int64)


# ---------------------------------------------------------------------------
# vision tokenizers


@dataclass(frozen=True)
class VisionTokenizerConfig:
    backend: str = "cnn_lite"  # cnn_lite | vit_lite
    image_size: int = 32
    patch_grid: int = 4
    token_dim: int = 64
    vit_internal_pose: bool = False

    def validate(self) -> None:
        if self.backend not in ("cnn_lite", "vit_lite"):
            raise ConfigError(f"unknown vision backend {self.backend!r}")
        if self.token_dim < 1:
            raise ConfigError(f"token_dim must be >= 1, got {self.token_dim}")
        if self.patch_grid < 1 or self.image_size % self.patch_grid != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_grid {self.patch_grid}"
            )
        if self.backend == "cnn_lite":
            half = self.image_size // 2
            if self.image_size % 2 != 0 or half % self.patch_grid != 0:
                raise ConfigError(
                    f"cnn_lite needs image_size/2 divisible by patch_grid; "
                    f"got image_size {self.image_size}, patch_grid {self.patch_grid}"
                )

    @property
    def n_tokens(self) -> int:
        return self.patch_grid * self.patch_grid


@dataclass
class VisionTokens:
    """g*g raw vision tokens for one image, row-major over the patch grid."""

    tokens: ad.Tensor  # (g*g, token_dim)
    source_grid: int


_CNN_STEM_CH = 16
_CNN_BANK_CH = 8  # 3 color + 4 edge orientations + 1 laplacian

# Classic 3x3 derivative kernels, scaled so responses stay near input range.
_KERN_EDGE_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 4.0
_KERN_EDGE_Y = _KERN_EDGE_X.T.copy()
_KERN_DIAG_A = np.array([[0, 1, 2], [-1, 0, 1], [-2, -1, 0]], dtype=np.float64) / 4.0
_KERN_DIAG_B = np.array([[2, 1, 0], [1, 0, -1], [0, -1, -2]], dtype=np.float64) / 4.0
_KERN_LAPLACE = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64) / 4.0


def _corr3(padded: np.ndarray, kern: np.ndarray, size: int) -> np.ndarray:
    """3x3 cross-correlation over an edge-padded (B, size+2, size+2) map."""
    out = np.zeros((padded.shape[0], size, size), dtype=padded.dtype)
    for i in range(3):
        for j in range(3):
            if kern[i, j] != 0.0:
                out += kern[i, j] * padded[:, i : i + size, j : j + size]
    return out


def _fixed_feature_maps(x: np.ndarray) -> np.ndarray:
    """Frozen feature bank for cnn_lite: (B, 3, S, S) -> (B, 8, S/2, S/2).

    A 2x2 mean pool, then per-pixel color plus rectified edge responses
    (two axis-aligned, two diagonal, one laplacian) on luminance.  These
    play the role a pretrained backbone's early layers play at full
    scale: the learned head starts from features that already separate
    color and contour instead of having to discover them end to end.
    """
    b, _, s, _ = x.shape
    half = s // 2
    pooled = x.reshape(b, 3, half, 2, half, 2).mean(axis=(3, 5))
    luma = 0.299 * pooled[:, 0] + 0.587 * pooled[:, 1] + 0.114 * pooled[:, 2]
    padded = np.pad(luma, ((0, 0), (1, 1), (1, 1)), mode="edge")
    edges = [
        np.abs(_corr3(padded, k, half))
        for k in (_KERN_EDGE_X, _KERN_EDGE_Y, _KERN_DIAG_A, _KERN_DIAG_B, _KERN_LAPLACE)
    ]
    return np.concatenate([pooled, np.stack(edges, axis=1)], axis=1)


def init_tokenizer_params(cfg: VisionTokenizerConfig, rng: np.random.Generator, dtype) -> dict:
    """Create the learned tensors for the configured backend.

    Conv and projection weights use fan-in scaling, biases zero, the
    learned patch pose table std 0.02 like the other embedding tables.
    Uniform tiny init starves the vision path: stacked 0.02-scale stages
    shrink features to ~1e-3 and the decoder learns to ignore the image.
    Insertion order is fixed so consuming rng draws is deterministic.
    """
    cfg.validate()

    def w(shape, fan_in):
        std = math.sqrt(2.0 / fan_in)
        return ad.Tensor(
            (rng.standard_normal(shape) * std).astype(dtype), requires_grad=True
        )

    def table(*shape):
        return ad.Tensor(
            (rng.standard_normal(shape) * 0.02).astype(dtype), requires_grad=True
        )

    def zeros(*shape):
        return ad.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    params: dict = {}
    if cfg.backend == "cnn_lite":
        k = (cfg.image_size // 2) // cfg.patch_grid
        ch = _CNN_STEM_CH
        bank = _CNN_BANK_CH
        params["res_a_w"] = w((ch, bank, 3, 3), fan_in=bank * 9)
        params["res_a_b"] = zeros(ch)
        params["res_b_w"] = w((bank, ch, 3, 3), fan_in=ch * 9)
        params["res_b_b"] = zeros(bank)
        params["out_w"] = w((cfg.token_dim, bank, k, k), fan_in=bank * k * k)
        params["out_b"] = zeros(cfg.token_dim)
    else:
        p = cfg.image_size // cfg.patch_grid
        params["proj_w"] = w((3 * p * p, cfg.token_dim), fan_in=3 * p * p)
        params["proj_b"] = zeros(cfg.token_dim)
        if cfg.vit_internal_pose:
            params["pose"] = table(cfg.n_tokens, cfg.token_dim)
    return params


def _check_image_batch(imgs: np.ndarray, cfg: VisionTokenizerConfig) -> np.ndarray:
    imgs = np.asarray(imgs)
    if imgs.ndim != 4 or imgs.shape[3] != 3:
        raise DataError(f"expected image batch (B, H, W, 3), got shape {imgs.shape}")
    if imgs.shape[1] != cfg.image_size or imgs.shape[2] != cfg.image_size:
        raise DataError(
            f"image size {imgs.shape[1]}x{imgs.shape[2]} does not match "
            f"configured {cfg.image_size}x{cfg.image_size}"
        )
    return np.ascontiguousarray(imgs.transpose(0, 3, 1, 2))  # to (B, 3, H, W)


def encode_images(imgs: np.ndarray, cfg: VisionTokenizerConfig, params: dict) -> ad.Tensor:
    """Batched tokenizer core: (B, H, W, 3) floats -> (B, g*g, token_dim)."""
    x_raw = _check_image_batch(imgs, cfg)
    model_dtype = next(iter(params.values())).data.dtype
    if x_raw.dtype != model_dtype:
        x_raw = x_raw.astype(model_dtype)  # keep the whole graph in one dtype
    # Pixels arrive in [0, 1]; recentre to [-1, 1] so the first layer sees
    # zero-mean inputs instead of an all-positive block that mostly trains
    # its bias.
    x_raw = 2.0 * x_raw - 1.0
    g = cfg.patch_grid
    b = x_raw.shape[0]
    if cfg.backend == "cnn_lite":
        # Stage 1 is the frozen bank; stages 2 (residual pair) and 3
        # (grid-collapsing conv) are learned.
        feats = ad.Tensor(_fixed_feature_maps(x_raw))
        r = ad.gelu(ad.conv2d(feats, params["res_a_w"], params["res_a_b"], stride=1, pad=1))
        r = ad.conv2d(r, params["res_b_w"], params["res_b_b"], stride=1, pad=1)
        h = ad.gelu(ad.add(feats, r))
        k = (cfg.image_size // 2) // g
        out = ad.conv2d(h, params["out_w"], params["out_b"], stride=k, pad=0)
        # (B, token_dim, g, g) -> (B, g*g, token_dim), row-major over the grid
        out = ad.transpose(out, (0, 2, 3, 1))
        return ad.reshape(out, (b, g * g, cfg.token_dim))
    # vit_lite: im2col with kernel = stride = patch size yields one row per
    # patch, row-major, exactly the flattening the projection expects.
    p = cfg.image_size // g
    patches = kernels.im2col(x_raw, p, p, p, 0)  # (B, g*g, 3*p*p)
    tokens = ad.matmul(ad.Tensor(patches), params["proj_w"])
    tokens = ad.add(tokens, params["proj_b"])
    if cfg.vit_internal_pose:
        tokens = ad.add(tokens, params["pose"])  # broadcasts over the batch
    return tokens


def tokenize_image(img: np.ndarray, cfg: VisionTokenizerConfig, params: dict) -> VisionTokens:
    """Single-image wrapper over ``encode_images`` returning VisionTokens."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise DataError(f"expected one (H, W, 3) image, got shape {img.shape}")
    batch = encode_images(img[None], cfg, params)
    return VisionTokens(tokens=batch[0], source_grid=cfg.patch_grid)
