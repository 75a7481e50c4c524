"""The causal decoder over mixed word/vision tokens, plus checkpointing.

Architecture: pre-norm transformer blocks, x += MHA(LN(x)) then
x += MLP(LN(x)), with a final layer norm.  Attention is strictly causal
for every position, vision tokens included; the additive mask uses -1e9,
which underflows to an exact zero weight after softmax, so causality holds
bitwise rather than approximately.

The answer head reads the hidden state at the last sequence position
(whose modality therefore depends on the configured token order) and maps
it through linear -> GELU -> linear to class logits.

Checkpoints are a flat binary format: magic "VQAG", a version word, three
length-prefixed UTF-8 text blocks (run config, vocabulary, label map), and
the named parameter tensors as raw little-endian bytes.  Round-trips are
bitwise exact.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .embedding import (
    EmbeddingTables,
    SequencingConfig,
    TokenSequence,
    embed_vision,
    embed_words,
    init_embedding_tables,
    sequence,
)
from .errors import CheckpointError, ConfigError
from .tokenizers import (
    PAD_ID,
    VisionTokenizerConfig,
    encode_images,
    init_tokenizer_params,
)

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_ratio: int = 4
    max_pos: int = 64
    num_classes: int = 11
    dropout: float = 0.0
    sequencing: SequencingConfig = field(default_factory=SequencingConfig)
    tokenizer: VisionTokenizerConfig = field(default_factory=VisionTokenizerConfig)
    vocab_size: int = 2

    def validate(self) -> None:
        if self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.dropout != 0.0:
            raise ConfigError("nonzero dropout is not implemented; set dropout = 0")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must cover at least PAD and UNK")
        self.sequencing.validate()
        self.tokenizer.validate()

    @property
    def seq_len_limit(self) -> int:
        # Word positions draw on the pose table; vision adds g*g tokens.
        return self.max_pos + self.tokenizer.n_tokens


class VQAModel:
    """Parameter container plus the forward passes defined over it."""

    def __init__(self, config: ModelConfig, params: dict, tables: EmbeddingTables):
        self.config = config
        self.params = params  # flat name -> Tensor, fixed insertion order
        self.tables = tables

    @property
    def tok_params(self) -> dict:
        return {k[len("tok."):]: v for k, v in self.params.items() if k.startswith("tok.")}

    def trainable_params(self) -> dict:
        """Parameters that participate in the loss graph for this config."""
        out = dict(self.params)
        if not self.config.sequencing.use_type_embedding:
            out.pop("emb.type")
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> VQAModel:
    """Instantiate all parameters: weights ~ N(0, 0.02), biases 0, LN gains 1.

    Creation order is fixed (embeddings, tokenizer, blocks, final norm,
    head), so a seed fully determines every tensor bitwise.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))

    def w(*shape):
        return ad.Tensor((rng.standard_normal(shape) * 0.02).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return ad.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return ad.Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    d = config.d
    hidden = config.mlp_ratio * d
    tables = init_embedding_tables(
        config.vocab_size,
        d,
        config.max_pos,
        config.tokenizer.token_dim,
        config.sequencing.use_vision_projection_path,
        rng,
        dtype,
    )
    params: dict = {
        "emb.word": tables.word_table,
        "emb.type": tables.type_table,
        "emb.pos": tables.pos_table,
    }
    if tables.proj_w is not None:
        params["emb.proj_w"] = tables.proj_w
        params["emb.proj_b"] = tables.proj_b
    for name, tensor in init_tokenizer_params(config.tokenizer, rng, dtype).items():
        params[f"tok.{name}"] = tensor
    for i in range(config.n_layers):
        params[f"h{i}.ln1_g"] = ones(d)
        params[f"h{i}.ln1_b"] = zeros(d)
        params[f"h{i}.qkv_w"] = w(d, 3 * d)
        params[f"h{i}.qkv_b"] = zeros(3 * d)
        params[f"h{i}.attn_out_w"] = w(d, d)
        params[f"h{i}.attn_out_b"] = zeros(d)
        params[f"h{i}.ln2_g"] = ones(d)
        params[f"h{i}.ln2_b"] = zeros(d)
        params[f"h{i}.mlp_in_w"] = w(d, hidden)
        params[f"h{i}.mlp_in_b"] = zeros(hidden)
        params[f"h{i}.mlp_out_w"] = w(hidden, d)
        params[f"h{i}.mlp_out_b"] = zeros(d)
    params["lnf_g"] = ones(d)
    params["lnf_b"] = zeros(d)
    params["head.fc1_w"] = w(d, d)
    params["head.fc1_b"] = zeros(d)
    params["head.fc2_w"] = w(d, config.num_classes)
    params["head.fc2_b"] = zeros(config.num_classes)
    return VQAModel(config, params, tables)


def decoder_forward(seq: TokenSequence, model: VQAModel, key_pad=None) -> ad.Tensor:
    """Run the block stack; returns hidden states shaped like seq.embedded.

    key_pad, when given, is a boolean (B, L) array marking padding
    positions whose keys every query must ignore; queries at those
    positions still run but nothing downstream reads them.
    """
    cfg = model.config
    p = model.params
    x = seq.embedded
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + tuple(x.shape))
    bsz, length, d = x.shape
    if length > cfg.seq_len_limit:
        raise ValueError(f"sequence length {length} exceeds limit {cfg.seq_len_limit}")
    nh = cfg.n_heads
    hd = d // nh
    scale = 1.0 / math.sqrt(hd)
    mask_data = np.triu(np.full((length, length), MASK_VALUE, dtype=x.dtype), k=1)
    if key_pad is not None:
        key_pad = np.asarray(key_pad, dtype=bool)
        if key_pad.ndim == 1:
            key_pad = key_pad[None, :]
        if key_pad.shape != (bsz, length):
            raise ValueError(
                f"key_pad shape {key_pad.shape} does not match batch {(bsz, length)}"
            )
        pad_add = np.where(key_pad, MASK_VALUE, 0.0).astype(x.dtype)
        mask_data = mask_data[None, None] + pad_add[:, None, None, :]
    mask = ad.Tensor(mask_data)
    for i in range(cfg.n_layers):
        h = ad.layer_norm(x, p[f"h{i}.ln1_g"], p[f"h{i}.ln1_b"])
        qkv = ad.add(ad.matmul(h, p[f"h{i}.qkv_w"]), p[f"h{i}.qkv_b"])
        parts = []
        for s in range(3):
            part = qkv[:, :, s * d : (s + 1) * d]
            part = ad.reshape(part, (bsz, length, nh, hd))
            parts.append(ad.transpose(part, (0, 2, 1, 3)))  # (B, nh, L, hd)
        q, k, v = parts
        att = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * scale
        att = ad.softmax(ad.add(att, mask), axis=-1)
        o = ad.matmul(att, v)  # (B, nh, L, hd)
        o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (bsz, length, d))
        x = ad.add(x, ad.add(ad.matmul(o, p[f"h{i}.attn_out_w"]), p[f"h{i}.attn_out_b"]))
        h2 = ad.layer_norm(x, p[f"h{i}.ln2_g"], p[f"h{i}.ln2_b"])
        mid = ad.gelu(ad.add(ad.matmul(h2, p[f"h{i}.mlp_in_w"]), p[f"h{i}.mlp_in_b"]))
        x = ad.add(x, ad.add(ad.matmul(mid, p[f"h{i}.mlp_out_w"]), p[f"h{i}.mlp_out_b"]))
    x = ad.layer_norm(x, p["lnf_g"], p["lnf_b"])
    if squeeze:
        x = ad.reshape(x, tuple(x.shape[1:]))
    return x


def classify(seq: TokenSequence, model: VQAModel, key_pad=None) -> ad.Tensor:
    """Class logits from the hidden state at the final sequence position."""
    if seq.length == 0:
        raise ValueError("cannot classify an empty sequence")
    h = decoder_forward(seq, model, key_pad=key_pad)
    last = h[..., seq.length - 1, :]
    if last.ndim == 1:
        last = ad.reshape(last, (1,) + tuple(last.shape))
        mid = ad.gelu(ad.add(ad.matmul(last, model.params["head.fc1_w"]), model.params["head.fc1_b"]))
        out = ad.add(ad.matmul(mid, model.params["head.fc2_w"]), model.params["head.fc2_b"])
        return ad.reshape(out, (model.config.num_classes,))
    mid = ad.gelu(ad.add(ad.matmul(last, model.params["head.fc1_w"]), model.params["head.fc1_b"]))
    return ad.add(ad.matmul(mid, model.params["head.fc2_w"]), model.params["head.fc2_b"])


def build_sequence(images: np.ndarray, question_ids: np.ndarray, model: VQAModel) -> TokenSequence:
    """images (B, H, W, 3) + question ids (B, n) -> embedded TokenSequence."""
    cfg = model.config
    vision_raw = encode_images(images, cfg.tokenizer, model.tok_params)
    words_e = embed_words(question_ids, model.tables, cfg.sequencing)
    vision_e = embed_vision(
        vision_raw, model.tables, cfg.sequencing, word_count=question_ids.shape[-1]
    )
    return sequence(words_e, vision_e, cfg.sequencing)


def _padding_keys(question_ids: np.ndarray, model: VQAModel) -> np.ndarray:
    """Boolean (B, L) marker of PAD word positions in sequence order."""
    qids = np.atleast_2d(np.asarray(question_ids))
    word_pad = qids == PAD_ID
    vision = np.zeros(
        (word_pad.shape[0], model.config.tokenizer.n_tokens), dtype=bool
    )
    if model.config.sequencing.order == "early_word":
        return np.concatenate([word_pad, vision], axis=1)
    return np.concatenate([vision, word_pad], axis=1)


def forward_logits(images: np.ndarray, question_ids: np.ndarray, model: VQAModel) -> ad.Tensor:
    seq = build_sequence(images, question_ids, model)
    return classify(seq, model, key_pad=_padding_keys(question_ids, model))


def predict(images: np.ndarray, question_ids: np.ndarray, model: VQAModel) -> np.ndarray:
    """Argmax class per sample; ties resolve to the lowest class index."""
    with ad.no_grad():
        logits = forward_logits(images, question_ids, model)
    return np.argmax(logits.data, axis=-1)  # np.argmax returns the first maximum


def train_step(batch, model: VQAModel, opt: ad.AdamState) -> float:
    """One optimization step; returns the pre-step mean cross-entropy."""
    images, question_ids, labels = batch
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= model.config.num_classes):
        raise ValueError(
            f"label out of range [0, {model.config.num_classes}): "
            f"min {labels.min()}, max {labels.max()}"
        )
    trainable = model.trainable_params()
    ad.zero_grad(trainable)
    logits = forward_logits(images, question_ids, model)
    loss = ad.cross_entropy(logits, labels)
    ad.backward(loss)
    grads = {name: t.grad for name, t in trainable.items()}
    ad.adam_step(trainable, grads, opt)
    return float(loss.data)


# ---------------------------------------------------------------------------
# checkpoint format


CHECKPOINT_MAGIC = b"VQAG"
CHECKPOINT_VERSION = 1


def _write_block(f, payload: bytes) -> None:
    f.write(struct.pack("<Q", len(payload)))
    f.write(payload)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def _read_block(f, what: str) -> bytes:
    (n,) = struct.unpack("<Q", _read_exact(f, 8, f"{what} length"))
    return _read_exact(f, n, what)


def save_checkpoint(
    path,
    model: VQAModel,
    config_text: str,
    vocab_lines: list,
    label_lines: list,
) -> None:
    """Serialize config text, vocab, label map, and all named tensors."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_block(f, config_text.encode("utf-8"))
        _write_block(f, "\n".join(vocab_lines).encode("utf-8"))
        _write_block(f, "\n".join(label_lines).encode("utf-8"))
        f.write(struct.pack("<I", len(model.params)))
        for name, tensor in model.params.items():
            arr = np.ascontiguousarray(tensor.data)
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            _write_block(f, name.encode("utf-8"))
            _write_block(f, arr.dtype.str.encode("ascii"))
            f.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<Q", extent))
            _write_block(f, arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (config_text, vocab_lines, label_lines, tensors).

    ``tensors`` maps name -> ndarray.  Validation against a ModelConfig
    happens in ``restore_model``, which also checks shape compatibility.
    """
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config_text = _read_block(f, "config block").decode("utf-8")
        vocab_text = _read_block(f, "vocabulary block").decode("utf-8")
        label_text = _read_block(f, "label map block").decode("utf-8")
        (n_tensors,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors: dict = {}
        for _ in range(n_tensors):
            name = _read_block(f, "tensor name").decode("utf-8")
            dtype_str = _read_block(f, f"dtype of {name}").decode("ascii")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, f"ndim of {name}"))
            shape = tuple(
                struct.unpack("<Q", _read_exact(f, 8, f"shape of {name}"))[0]
                for _ in range(ndim)
            )
            raw = _read_block(f, f"data of {name}")
            try:
                arr = np.frombuffer(raw, dtype=np.dtype(dtype_str)).reshape(shape).copy()
            except (TypeError, ValueError) as exc:
                raise CheckpointError(f"corrupt tensor {name!r}: {exc}") from exc
            tensors[name] = arr
        trailing = f.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after final tensor")
    vocab_lines = vocab_text.split("\n") if vocab_text else []
    label_lines = label_text.split("\n") if label_text else []
    return config_text, vocab_lines, label_lines, tensors


def restore_model(config: ModelConfig, tensors: dict, dtype=None) -> VQAModel:
    """Build a model from config and overwrite every parameter from ``tensors``."""
    sample = next(iter(tensors.values()), None)
    if dtype is None:
        dtype = sample.dtype if sample is not None else np.float32
    model = init_params(config, seed=0, dtype=dtype)
    if set(tensors) != set(model.params):
        missing = sorted(set(model.params) - set(tensors))
        extra = sorted(set(tensors) - set(model.params))
        raise CheckpointError(
            f"checkpoint tensors do not match config: missing {missing}, extra {extra}"
        )
    for name, param in model.params.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(param.data.shape):
            raise CheckpointError(
                f"tensor {name!r} shape {arr.shape} does not match "
                f"configured {tuple(param.data.shape)}"
            )
        param.data = arr.astype(dtype, copy=True) if arr.dtype != dtype else arr.copy()
    return model
