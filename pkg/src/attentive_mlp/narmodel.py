"""Toy parallel-decoding encoder-decoder on synthetic copy/reverse tasks.

One encoder block and one decoder block around the configurable attention
mechanism.  The decoder is driven purely by learned position embeddings, so
every target position is produced in a single forward pass and ground-truth
targets only ever enter through the loss.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .attention import (
    AmlpCovParams,
    AmlpPQueryParams,
    ConfigError,
    MultiHeadParams,
    mlp_forward,
    multi_head_forward,
)
from .tensor import (
    ContractError,
    Tape,
    Tensor,
    add,
    add_bias,
    backward,
    cross_entropy,
    gather_rows,
    layer_norm,
    matmul,
    scale,
)

__all__ = [
    "InputError",
    "NarConfig",
    "NarModel",
    "SyntheticTask",
    "evaluate",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("cov", "pquery", "softmax")

CHECKPOINT_MAGIC = "attentive-mlp-checkpoint"
CHECKPOINT_VERSION = 1


class InputError(ValueError):
    """Model input (token ids, sequence length) is malformed."""


@dataclass(frozen=True)
class NarConfig:
    vocab_size: int = 16
    seq_len: int = 12
    source_len: int = 12
    d_model: int = 32
    heads: int = 2
    c: int = 8
    variant: str = "cov"
    sigma1: str = "softmax"
    beta: float = 0.5
    learning_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads != 0:
            raise ConfigError(f"heads={self.heads} must divide d_model={self.d_model}")
        if not (1 <= self.c <= self.d_model // self.heads):
            raise ConfigError(f"need 1 <= c <= d_model/heads, got c={self.c}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass(frozen=True)
class SyntheticTask:
    """Deterministic source-to-target mapping with a seeded sampler.

    kind "copy" maps a sequence to itself, "reverse" to its mirror image.
    Sampling is reproducible per (seed, split): the same call returns the
    same pairs, and train/eval splits never overlap streams.
    """

    kind: str
    vocab: int
    length: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("copy", "reverse"):
            raise ConfigError(f"task kind must be copy or reverse, got {self.kind!r}")

    def _target(self, source: np.ndarray) -> np.ndarray:
        return source.copy() if self.kind == "copy" else source[::-1].copy()

    def sample(self, count: int, split: str = "eval") -> list[tuple[np.ndarray, np.ndarray]]:
        """A fixed, reproducible set of (source, target) pairs."""
        if count < 1:
            raise ContractError(f"count must be >= 1, got {count}")
        rng = np.random.default_rng([self.seed, {"train": 0, "eval": 1}[split]])
        sources = rng.integers(0, self.vocab, size=(count, self.length))
        return [(s.copy(), self._target(s)) for s in sources]

    def stream(self, batch_size: int, split: str = "train"):
        """Infinite generator of fresh batches from a persistent rng."""
        rng = np.random.default_rng([self.seed, {"train": 0, "eval": 1}[split], 1])
        while True:
            sources = rng.integers(0, self.vocab, size=(batch_size, self.length))
            yield [(s.copy(), self._target(s)) for s in sources]


class NarModel:
    """Encoder-decoder with token/position embeddings and one block each side.

    Parameters live in a flat name -> ndarray dict so training, checkpointing
    and gradient checking can treat them uniformly.
    """

    def __init__(self, config: NarConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        dh = d // config.heads
        p: dict[str, np.ndarray] = {}

        def init(name, shape, scale):
            p[name] = rng.standard_normal(shape) * scale

        init("embed", (config.vocab_size, d), d**-0.5)
        init("src_pos", (config.source_len, d), d**-0.5)
        init("tgt_pos", (config.seq_len, d), d**-0.5)
        for block in ("enc_self", "dec_self", "dec_cross"):
            for w in ("wq", "wk", "wv", "wo"):
                init(f"{block}.{w}", (d, d), d**-0.5)
            if config.variant in ("cov", "pquery"):
                for j in range(config.heads):
                    init(f"{block}.h{j}.cq", (config.c, dh), dh**-0.5)
                    init(f"{block}.h{j}.ck", (config.c, dh), dh**-0.5)
                    if config.variant == "pquery":
                        init(f"{block}.h{j}.w", (2 * dh, dh), (2 * dh) ** -0.5)
        for block in ("enc", "dec"):
            init(f"{block}_mlp.w1", (d, 2 * d), d**-0.5)
            init(f"{block}_mlp.w2", (2 * d, d), (2 * d) ** -0.5)
        for ln in ("enc_ln1", "enc_ln2", "dec_ln1", "dec_ln2", "dec_ln3"):
            p[f"{ln}.g"] = np.ones(d)
            p[f"{ln}.b"] = np.zeros(d)
        # small output head keeps the untrained prediction near uniform
        init("out_w", (d, config.vocab_size), 1.0 / d)
        p["out_b"] = np.zeros(config.vocab_size)
        self.params = p

    # -- forward ----------------------------------------------------------

    def _check_source(self, source_tokens) -> np.ndarray:
        src = np.asarray(source_tokens, dtype=np.int64)
        if src.shape != (self.config.source_len,):
            raise InputError(
                f"source must have {self.config.source_len} tokens, got shape {src.shape}"
            )
        if src.min() < 0 or src.max() >= self.config.vocab_size:
            raise InputError(f"token out of range for vocab {self.config.vocab_size}")
        return src

    def _attention(self, block: str, x_target, x_source, p):
        cfg = self.config
        head_params = []
        if cfg.variant == "cov":
            head_params = [
                AmlpCovParams(p[f"{block}.h{j}.cq"], p[f"{block}.h{j}.ck"], sigma1=cfg.sigma1)
                for j in range(cfg.heads)
            ]
        elif cfg.variant == "pquery":
            head_params = [
                AmlpPQueryParams(
                    p[f"{block}.h{j}.cq"],
                    p[f"{block}.h{j}.ck"],
                    p[f"{block}.h{j}.w"],
                    beta=cfg.beta,
                    sigma1=cfg.sigma1,
                )
                for j in range(cfg.heads)
            ]
        mh = MultiHeadParams(
            mechanism="softmax" if cfg.variant == "softmax" else cfg.variant,
            heads=cfg.heads,
            w_q=p[f"{block}.wq"],
            w_k=p[f"{block}.wk"],
            w_v=p[f"{block}.wv"],
            w_o=p[f"{block}.wo"],
            head_params=head_params,
        )
        return multi_head_forward(x_target, x_source, mh)

    def _forward(self, source_tokens, p):
        src = self._check_source(source_tokens)
        x = add(gather_rows(p["embed"], src), p["src_pos"])
        x = layer_norm(add(x, self._attention("enc_self", x, x, p)), p["enc_ln1.g"], p["enc_ln1.b"])
        ff = mlp_forward(x, p["enc_mlp.w1"], p["enc_mlp.w2"])
        memory = layer_norm(add(x, ff), p["enc_ln2.g"], p["enc_ln2.b"])

        y = p["tgt_pos"]
        y = layer_norm(add(y, self._attention("dec_self", y, y, p)), p["dec_ln1.g"], p["dec_ln1.b"])
        y = layer_norm(
            add(y, self._attention("dec_cross", y, memory, p)), p["dec_ln2.g"], p["dec_ln2.b"]
        )
        ff = mlp_forward(y, p["dec_mlp.w1"], p["dec_mlp.w2"])
        y = layer_norm(add(y, ff), p["dec_ln3.g"], p["dec_ln3.b"])
        return add_bias(matmul(y, p["out_w"]), p["out_b"])

    def forward(self, source_tokens) -> Tensor:
        """Logits for all target positions in one pass, shape seq_len x vocab."""
        p = {k: Tensor(v) for k, v in self.params.items()}
        return self._forward(source_tokens, p)

    # -- training ---------------------------------------------------------

    def train_step(self, batch) -> float:
        """One SGD step on a batch of (source, target) pairs; returns the pre-update loss."""
        if not batch:
            raise ContractError("batch must be nonempty")
        tape = Tape()
        p = {k: tape.leaf(Tensor(v), requires_grad=True) for k, v in self.params.items()}
        total = None
        for source, target in batch:
            logits = self._forward(source, p)
            sample_loss = cross_entropy(logits, np.asarray(target, dtype=np.int64))
            total = sample_loss if total is None else add(total, sample_loss)
        loss = scale(total, 1.0 / len(batch))
        backward(tape, loss)
        lr = self.config.learning_rate
        if lr != 0.0:
            for name, var in p.items():
                self.params[name] = self.params[name] - lr * var.grad.data
        return loss.item()

    # -- inference --------------------------------------------------------

    def generate(self, source_tokens) -> np.ndarray:
        """Argmax decode of every position at once; ties pick the lower token id."""
        logits = self.forward(source_tokens)
        return np.argmax(logits.data, axis=1)

    def evaluate(self, task: SyntheticTask, num_samples: int, split: str = "eval") -> float:
        return evaluate(self, task, num_samples, split=split)


def evaluate(model, task: SyntheticTask, num_samples: int, split: str = "eval") -> float:
    """Fraction of positions where the model's decode matches the ground truth."""
    if num_samples < 1:
        raise ContractError(f"num_samples must be >= 1, got {num_samples}")
    correct = 0
    total = 0
    for source, target in task.sample(num_samples, split=split):
        pred = np.asarray(model.generate(source))
        correct += int((pred == target).sum())
        total += len(target)
    return correct / total


def train(
    model: NarModel,
    task: SyntheticTask,
    steps: int,
    batch_size: int = 8,
    log_every: int = 100,
    log=None,
) -> list[float]:
    """Run `steps` SGD steps against the task's training stream; returns the losses."""
    losses: list[float] = []
    batches = task.stream(batch_size, split="train")
    for step in range(steps):
        loss = model.train_step(next(batches))
        losses.append(loss)
        if log is not None and log_every and step % log_every == 0:
            log(step, loss)
    return losses


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: NarModel, path: str) -> None:
    """Write a versioned textual dump; float64 payloads are hex, so round-trips
    are bit-exact."""
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}"]
    lines.append("config " + json.dumps(asdict(model.config), sort_keys=True))
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        dims = ",".join(str(s) for s in arr.shape)
        lines.append(f"param {name} {dims} {arr.tobytes().hex()}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str) -> NarModel:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}":
        raise ContractError(f"not a v{CHECKPOINT_VERSION} checkpoint: {path}")
    if not lines[1].startswith("config "):
        raise ContractError(f"missing config line in {path}")
    config = NarConfig(**json.loads(lines[1][len("config ") :]))
    model = NarModel(config)
    seen = set()
    for line in lines[2:]:
        if not line:
            continue
        kind, name, dims, payload = line.split(" ", 3)
        if kind != "param":
            raise ContractError(f"unexpected line kind {kind!r} in {path}")
        shape = tuple(int(s) for s in dims.split(",")) if dims else ()
        arr = np.frombuffer(bytes.fromhex(payload), dtype="<f8").reshape(shape).copy()
        if name not in model.params or model.params[name].shape != arr.shape:
            raise ContractError(f"checkpoint param {name!r} does not fit the config")
        model.params[name] = arr
        seen.add(name)
    if seen != set(model.params):
        raise ContractError(f"checkpoint is missing parameters: {sorted(set(model.params) - seen)}")
    return model
