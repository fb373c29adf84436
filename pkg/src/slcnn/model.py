"""The sentence-level CNN: block assembly, training, and checkpoints.

Two variants share a trunk of four horizontal convolutional blocks (HCBs),
each two 1x2 conv+ReLU layers and a horizontal max-pool, which collapse
the 46-wide word axis to 1 (46 -> 22 -> 10 -> 4 -> 1) while never mixing
sentence rows.  The "+v" variant inserts a vertical convolutional block
(two 2x1 conv+ReLU layers and a vertical max-pool) that mixes adjacent
sentences before the dense head.  After the first conv layer every bank
convolves across all 128 channels.

Embeddings are frozen and live outside the model; trainable parameters
are exactly the conv banks and the three dense layers.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .corpus import GridDataset
from .embedding import EmbeddingTable, embedding_matrix_for_vocab
from . import nn

SLCNN = "slcnn"
SLCNN_V = "slcnn+v"
VARIANTS = (SLCNN, SLCNN_V)

FC_SIZES = {"small": 512, "large": 1024}

CHECKPOINT_MAGIC = b"SLCN"
CHECKPOINT_VERSION = 1

# Seed-stream ids so shuffling, dropout, and init never share a stream.
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_DROPOUT = 2
STREAM_LIMIT = 3
STREAM_SPLIT = 4


class ConfigError(Exception):
    """Raised when a ModelConfig violates an architecture invariant."""


class CheckpointError(Exception):
    """Raised for corrupt, truncated, or incompatible checkpoint files."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint architecture differs from what the caller expects."""


class TrainingDivergedError(Exception):
    def __init__(self, epoch: int, batch: int, detail: str) -> None:
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


def hcb_width_schedule(sent_len: int) -> list[int]:
    """Widths after each horizontal block, ending at exactly 1.

    Each block maps width w -> floor((w - 2) / 2) and needs w >= 4; raises
    ConfigError when the recurrence cannot reach 1 (as for w ending at 2).
    """
    widths = []
    w = sent_len
    while w > 1:
        if w < 4:
            raise ConfigError(
                f"sentence length {sent_len} cannot collapse to width 1 "
                f"(stuck at {w}; each block needs width >= 4)"
            )
        w = (w - 2) // 2
        widths.append(w)
    if w != 1:
        raise ConfigError(f"sentence length {sent_len} does not collapse to width 1")
    return widths


@dataclass
class ModelConfig:
    variant: str
    doc_len: int
    num_classes: int
    fc_size: int = 512
    num_filters: int = 128
    sent_len: int = 46
    embed_dim: int = 100
    seed: int = 0
    lr: float = 0.001
    epochs: int = 50
    batch_size: int = 64
    dropout_rate: float = 0.5

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.doc_len < 1:
            raise ConfigError("doc_len must be >= 1")
        if self.variant == SLCNN_V and self.doc_len < 4:
            raise ConfigError(
                f"variant {SLCNN_V!r} needs doc_len >= 4 (two 2x1 convs then a pool "
                f"of 2); got doc_len={self.doc_len}"
            )
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        # Raises when the word axis cannot collapse to 1 (46 always works).
        self.hcb_widths = hcb_width_schedule(self.sent_len)

    @property
    def num_hcb(self) -> int:
        return len(self.hcb_widths)

    @property
    def flatten_rows(self) -> int:
        if self.variant == SLCNN_V:
            return (self.doc_len - 2) // 2
        return self.doc_len

    @property
    def flatten_size(self) -> int:
        return self.flatten_rows * self.num_filters

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TrainReport:
    """Per-epoch training trace plus final evaluation numbers."""

    config: dict
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_val_epoch: int | None = None
    best_val_accuracy: float | None = None
    test_accuracy_final: float | None = None
    test_accuracy_best_val: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = 1
        return d


class Model:
    """Parameter container plus forward/backward for one variant."""

    def __init__(
        self,
        config: ModelConfig,
        conv_banks: list[nn.ConvFilterBank],
        vcb_banks: list[nn.ConvFilterBank],
        fc1: nn.DenseLayer,
        fc2: nn.DenseLayer,
        out: nn.DenseLayer,
    ) -> None:
        self.config = config
        self.conv_banks = conv_banks
        self.vcb_banks = vcb_banks
        self.fc1 = fc1
        self.fc2 = fc2
        self.out = out
        self.adam_state: nn.AdamState | None = None
        self.best_params: list[np.ndarray] | None = None

    # -- parameters --------------------------------------------------------

    def param_blocks(self) -> list[tuple[str, np.ndarray]]:
        """(name, array) pairs in declaration order; checkpoints and the
        optimizer both follow this order."""
        blocks: list[tuple[str, np.ndarray]] = []
        for i, bank in enumerate(self.conv_banks):
            hcb, layer = divmod(i, 2)
            prefix = f"hcb{hcb + 1}.conv{layer + 1}"
            blocks.append((prefix + ".w", bank.weights))
            blocks.append((prefix + ".b", bank.biases))
        for i, bank in enumerate(self.vcb_banks):
            prefix = f"vcb.conv{i + 1}"
            blocks.append((prefix + ".w", bank.weights))
            blocks.append((prefix + ".b", bank.biases))
        for name, layer in (("fc1", self.fc1), ("fc2", self.fc2), ("out", self.out)):
            blocks.append((name + ".w", layer.weights))
            blocks.append((name + ".b", layer.biases))
        return blocks

    def param_values(self) -> list[np.ndarray]:
        return [arr.copy() for _, arr in self.param_blocks()]

    def load_param_values(self, values: Sequence[np.ndarray]) -> None:
        blocks = self.param_blocks()
        if len(values) != len(blocks):
            raise ValueError(f"expected {len(blocks)} parameter blocks, got {len(values)}")
        for (name, arr), value in zip(blocks, values):
            if arr.shape != value.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {value.shape}")
            arr[...] = value

    def with_dtype(self, dtype) -> "Model":
        """A copy of this model with every parameter cast to *dtype*
        (float64 shadow copies for gradient checking)."""
        cast = lambda a: a.astype(dtype)
        clone = Model(
            self.config,
            [nn.ConvFilterBank(cast(b.weights), cast(b.biases)) for b in self.conv_banks],
            [nn.ConvFilterBank(cast(b.weights), cast(b.biases)) for b in self.vcb_banks],
            nn.DenseLayer(cast(self.fc1.weights), cast(self.fc1.biases)),
            nn.DenseLayer(cast(self.fc2.weights), cast(self.fc2.biases)),
            nn.DenseLayer(cast(self.out.weights), cast(self.out.biases)),
        )
        return clone

    # -- forward / backward -------------------------------------------------

    def _check_input(self, x: np.ndarray) -> None:
        cfg = self.config
        expected = (cfg.doc_len, cfg.sent_len, cfg.embed_dim)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise nn.ShapeError(
                f"expected input (batch, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {x.shape}"
            )

    def features(self, x: np.ndarray) -> np.ndarray:
        """Pre-flatten feature map (eval mode): one feature vector per row."""
        y, _ = self._conv_trunk(x)
        return y

    def _conv_trunk(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        self._check_input(x)
        caches: list = []
        y = x
        for hcb in range(self.config.num_hcb):
            bank_a, bank_b = self.conv_banks[2 * hcb], self.conv_banks[2 * hcb + 1]
            y, c1 = nn.conv2d_forward(y, bank_a, "relu")
            y, c2 = nn.conv2d_forward(y, bank_b, "relu")
            y, cp = nn.maxpool_forward(y, nn.HORIZONTAL)
            caches.append(("hcb", c1, c2, cp))
        if self.config.variant == SLCNN_V:
            y, c1 = nn.conv2d_forward(y, self.vcb_banks[0], "relu")
            y, c2 = nn.conv2d_forward(y, self.vcb_banks[1], "relu")
            y, cp = nn.maxpool_forward(y, nn.VERTICAL)
            caches.append(("vcb", c1, c2, cp))
        return y, caches

    def forward(
        self,
        x: np.ndarray,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        logits, _ = self._forward_with_caches(x, mode, rng)
        return logits

    def _forward_with_caches(
        self, x: np.ndarray, mode: str, rng: np.random.Generator | None
    ) -> tuple[np.ndarray, list]:
        cfg = self.config
        y, caches = self._conv_trunk(x)
        pre_flatten_shape = y.shape
        y = nn.flatten_rows(y)
        caches.append(("flatten", pre_flatten_shape))
        for name, layer in (("fc1", self.fc1), ("fc2", self.fc2)):
            y, dc = nn.dense_forward(y, layer, "relu")
            y, mask = nn.dropout(y, cfg.dropout_rate, mode, rng)
            caches.append((name, dc, mask))
        logits, dc = nn.dense_forward(y, self.out, "identity")
        caches.append(("out", dc))
        return logits, caches

    def _backward(self, caches: list, grad_logits: np.ndarray) -> list[np.ndarray]:
        """Gradients for every parameter block, aligned with param_blocks()."""
        grads: dict[str, np.ndarray] = {}
        stack = list(caches)

        kind, dc = stack.pop()
        g, grads["out.w"], grads["out.b"] = nn.dense_backward(self.out, dc, grad_logits)
        for name, layer in (("fc2", self.fc2), ("fc1", self.fc1)):
            kind, dc, mask = stack.pop()
            g = g * mask
            g, grads[name + ".w"], grads[name + ".b"] = nn.dense_backward(layer, dc, g)
        kind, pre_flatten_shape = stack.pop()
        g = g.reshape(pre_flatten_shape)

        if self.config.variant == SLCNN_V:
            kind, c1, c2, cp = stack.pop()
            g = nn.maxpool_backward(cp, g)
            g, grads["vcb.conv2.w"], grads["vcb.conv2.b"] = nn.conv2d_backward(
                self.vcb_banks[1], c2, g
            )
            g, grads["vcb.conv1.w"], grads["vcb.conv1.b"] = nn.conv2d_backward(
                self.vcb_banks[0], c1, g
            )
        for hcb in range(self.config.num_hcb - 1, -1, -1):
            kind, c1, c2, cp = stack.pop()
            g = nn.maxpool_backward(cp, g)
            prefix = f"hcb{hcb + 1}"
            g, grads[f"{prefix}.conv2.w"], grads[f"{prefix}.conv2.b"] = nn.conv2d_backward(
                self.conv_banks[2 * hcb + 1], c2, g
            )
            g, grads[f"{prefix}.conv1.w"], grads[f"{prefix}.conv1.b"] = nn.conv2d_backward(
                self.conv_banks[2 * hcb], c1, g
            )
        return [grads[name] for name, _ in self.param_blocks()]


# --------------------------------------------------------------------------
# Block-level ops
# --------------------------------------------------------------------------

def hcb_forward(
    x: np.ndarray, bank_a: nn.ConvFilterBank, bank_b: nn.ConvFilterBank
) -> np.ndarray:
    """One horizontal block: two 1x2 conv+ReLU then horizontal max-pool.

    Rows pass through untouched; width w becomes floor((w - 2) / 2).
    """
    width = x.shape[-2]
    if width < 4:
        raise nn.ShapeError(f"horizontal block needs width >= 4, got {width}")
    y, _ = nn.conv2d_forward(x, bank_a, "relu")
    y, _ = nn.conv2d_forward(y, bank_b, "relu")
    y, _ = nn.maxpool_forward(y, nn.HORIZONTAL)
    return y


def vcb_forward(
    x: np.ndarray, bank_a: nn.ConvFilterBank, bank_b: nn.ConvFilterBank
) -> np.ndarray:
    """The vertical block: two 2x1 conv+ReLU then vertical max-pool.

    Rows r become floor((r - 2) / 2); r < 4 would pool an empty axis and is
    rejected at configuration time.
    """
    rows = x.shape[-3]
    if rows < 4:
        raise nn.ShapeError(f"vertical block needs >= 4 rows, got {rows}")
    y, _ = nn.conv2d_forward(x, bank_a, "relu")
    y, _ = nn.conv2d_forward(y, bank_b, "relu")
    y, _ = nn.maxpool_forward(y, nn.VERTICAL)
    return y


# --------------------------------------------------------------------------
# Construction
# --------------------------------------------------------------------------

def _glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(np.float32)


def _init_conv(rng: np.random.Generator, k: int, s: int, t: int, c_in: int) -> nn.ConvFilterBank:
    w = _glorot_uniform(rng, (k, s, t, c_in), fan_in=s * t * c_in, fan_out=s * t * k)
    return nn.ConvFilterBank(weights=w, biases=np.zeros(k, dtype=np.float32))


def _init_dense(rng: np.random.Generator, out_dim: int, in_dim: int) -> nn.DenseLayer:
    w = _glorot_uniform(rng, (out_dim, in_dim), fan_in=in_dim, fan_out=out_dim)
    return nn.DenseLayer(weights=w, biases=np.zeros(out_dim, dtype=np.float32))


def build_model(config: ModelConfig, rng: np.random.Generator | None = None) -> Model:
    """Initialize all layers: Glorot-uniform weights, zero biases.

    Draw order is fixed (conv banks first, then the dense head) so a seed
    fully determines the initial parameters.
    """
    if rng is None:
        rng = np.random.default_rng([config.seed, STREAM_INIT])
    k = config.num_filters
    conv_banks = []
    for i in range(2 * config.num_hcb):
        c_in = config.embed_dim if i == 0 else k
        conv_banks.append(_init_conv(rng, k, 1, 2, c_in))
    vcb_banks = []
    if config.variant == SLCNN_V:
        vcb_banks = [_init_conv(rng, k, 2, 1, k) for _ in range(2)]
    fc1 = _init_dense(rng, config.fc_size, config.flatten_size)
    fc2 = _init_dense(rng, config.fc_size, config.fc_size)
    out = _init_dense(rng, config.num_classes, config.fc_size)
    return Model(config, conv_banks, vcb_banks, fc1, fc2, out)


def count_parameters(model: Model) -> int:
    """Exact number of trainable scalars (embeddings are frozen: zero)."""
    return sum(int(arr.size) for _, arr in model.param_blocks())


# --------------------------------------------------------------------------
# Data plumbing: id grids + frozen embedding rows
# --------------------------------------------------------------------------

@dataclass
class EmbeddedDataset:
    """Grid ids plus the embedding rows they index; row 0 is the pad vector."""

    grids: np.ndarray  # (N, doc_len, sent_len) int32
    labels: np.ndarray  # (N,) int64
    matrix: np.ndarray  # (vocab + 1, embed_dim) float32

    @classmethod
    def build(cls, dataset: GridDataset, table: EmbeddingTable) -> "EmbeddedDataset":
        matrix = embedding_matrix_for_vocab(table, dataset.vocab)
        return cls(grids=dataset.grids, labels=dataset.labels, matrix=matrix)

    def __len__(self) -> int:
        return len(self.labels)

    def tensors(self, idx: np.ndarray | slice) -> np.ndarray:
        return self.matrix[self.grids[idx]]


def _batches(n: int, batch_size: int, order: np.ndarray | None = None) -> Iterator[np.ndarray]:
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


# --------------------------------------------------------------------------
# Training and evaluation
# --------------------------------------------------------------------------

def train(
    model: Model,
    train_data: EmbeddedDataset,
    val_data: EmbeddedDataset | None = None,
    *,
    log_fn=None,
) -> TrainReport:
    """Mini-batch Adam training for config.epochs epochs.

    Shuffling and dropout derive from the config seed, so identical
    configs produce bit-identical per-epoch loss sequences.  The final
    model keeps its last-epoch weights; the best-validation snapshot is
    stored on ``model.best_params``.
    """
    cfg = model.config
    n = len(train_data)
    if n == 0:
        raise ValueError("training set is empty")
    blocks = model.param_blocks()
    names = [name for name, _ in blocks]
    params = [arr for _, arr in blocks]
    if model.adam_state is None:
        model.adam_state = nn.AdamState.for_params(params, lr=cfg.lr)
    report = TrainReport(config=cfg.to_dict())
    best_acc = -1.0

    sample_losses = np.zeros(n, dtype=np.float64)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, STREAM_SHUFFLE, epoch]).permutation(n)
        drop_rng = np.random.default_rng([cfg.seed, STREAM_DROPOUT, epoch])
        correct = 0
        for batch_no, idx in enumerate(_batches(n, cfg.batch_size, order)):
            x = train_data.tensors(idx)
            y = train_data.labels[idx]
            logits, caches = model._forward_with_caches(x, "train", drop_rng)
            try:
                _, grad_logits = nn.softmax_cross_entropy(logits, y)
                grads = model._backward(caches, grad_logits)
                nn.adam_step(params, grads, model.adam_state, names)
            except (ValueError, nn.OptimizerError) as exc:
                raise TrainingDivergedError(epoch, batch_no, str(exc)) from exc
            # Losses land at their dataset positions and are reduced in that
            # fixed order, so the epoch loss does not depend on the shuffle.
            sample_losses[idx] = nn.cross_entropy_per_sample(logits, y)
            correct += int((logits.argmax(axis=1) == y).sum())
        report.train_loss.append(float(sample_losses.sum()) / n)
        report.train_accuracy.append(correct / n)
        if val_data is not None:
            acc = evaluate(model, val_data)
            report.val_accuracy.append(acc)
            if acc > best_acc:
                best_acc = acc
                report.best_val_epoch = epoch
                report.best_val_accuracy = acc
                model.best_params = model.param_values()
        report.epoch_seconds.append(time.perf_counter() - t0)
        if log_fn is not None:
            log_fn(epoch, report)
    return report


def predict_proba(model: Model, x: np.ndarray) -> np.ndarray:
    return nn.softmax(model.forward(x, "eval"))


def predict_labels(model: Model, data: EmbeddedDataset, batch_size: int = 256) -> np.ndarray:
    """Argmax class per document; ties resolve to the lowest class index."""
    preds = np.empty(len(data), dtype=np.int64)
    for idx in _batches(len(data), batch_size):
        logits = model.forward(data.tensors(idx), "eval")
        preds[idx] = logits.argmax(axis=1)
    return preds


def evaluate(model: Model, data: EmbeddedDataset, batch_size: int = 256) -> float:
    """Fraction of documents whose argmax logit matches the label."""
    if len(data) == 0:
        raise ValueError("evaluation set is empty")
    preds = predict_labels(model, data, batch_size)
    return float((preds == data.labels).mean())


def confusion_matrix(model: Model, data: EmbeddedDataset, batch_size: int = 256) -> np.ndarray:
    preds = predict_labels(model, data, batch_size)
    c = model.config.num_classes
    out = np.zeros((c, c), dtype=np.int64)
    np.add.at(out, (data.labels, preds), 1)
    return out


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: Model, path: str | Path) -> None:
    """Binary checkpoint: magic ``SLCN``, u16 format version, a
    length-prefixed canonical-JSON config blob, the parameter blocks in
    declaration order (name, shape, little-endian float32 data), and a
    trailing CRC32 of everything before it."""
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<H", CHECKPOINT_VERSION)
    config_blob = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    body += struct.pack("<I", len(config_blob))
    body += config_blob
    for name, arr in model.param_blocks():
        raw_name = name.encode()
        body += struct.pack("<H", len(raw_name))
        body += raw_name
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.astype("<f4", copy=False).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Model:
    """Rebuild a model from a checkpoint; forward outputs are bit-identical
    to the saved model's.  *expect* (when given) must describe the same
    architecture or a CheckpointError is raised."""
    data = Path(path).read_bytes()
    if len(data) < 10:
        raise CheckpointError(f"truncated checkpoint: {path}")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointError(f"checksum mismatch (corrupt checkpoint): {path}")
    view = memoryview(data[:-4])

    def take(n: int) -> memoryview:
        nonlocal view
        if len(view) < n:
            raise CheckpointError(f"truncated checkpoint: {path}")
        chunk, view = view[:n], view[n:]
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file (bad magic): {path}")
    (version,) = struct.unpack("<H", take(2))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (config_len,) = struct.unpack("<I", take(4))
    try:
        config = ModelConfig.from_dict(json.loads(bytes(take(config_len)).decode()))
    except (json.JSONDecodeError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"bad config blob in checkpoint: {exc}") from exc

    if expect is not None:
        for attr in ("variant", "doc_len", "sent_len", "embed_dim", "num_filters",
                     "fc_size", "num_classes"):
            have, want = getattr(config, attr), getattr(expect, attr)
            if have != want:
                raise CheckpointMismatchError(
                    f"checkpoint {attr} is {have!r} but caller expects {want!r}"
                )

    model = build_model(config)
    for name, arr in model.param_blocks():
        (name_len,) = struct.unpack("<H", take(2))
        stored_name = bytes(take(name_len)).decode()
        if stored_name != name:
            raise CheckpointError(f"parameter block {stored_name!r} where {name!r} expected")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if shape != arr.shape:
            raise CheckpointError(f"block {name}: stored shape {shape} != expected {arr.shape}")
        count = int(np.prod(shape)) if shape else 1
        arr[...] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
    if len(view):
        raise CheckpointError(f"trailing bytes in checkpoint: {path}")
    return model
