"""Compact residual 1-D convolutional pulse encoder with multitask heads.

The trunk is conv-norm-relu x2 residual blocks with stride-2 downsampling
and global average pooling; the pooled representation is the exported
embedding.  Training uses gradient descent with decoupled weight decay.
The adaptive update (the default) keeps per-parameter first/second moment
estimates m and v:

    m <- b1*m + (1-b1)*g            v <- b2*v + (1-b2)*g^2
    mh = m / (1 - b1^t)             vh = v / (1 - b2^t)
    theta <- theta - lr_t * mh / (sqrt(vh) + eps) - lr_t * wd * theta

with lr_t following a cosine schedule after one epoch of linear warmup.
The "sgd" variant replaces the first line's ratio with the raw gradient.
After every epoch the tune-split embeddings are reduced to five principal
components and scored with an unpenalized Cox fit; the checkpoint with the
highest tune partial log-likelihood wins (ties go to the later epoch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import NumericalError, ValidationError
from .pca import fit_pca, project
from .rng import derive_seed, keyed_rng
from .survival import ModelSpec, fit_cox
from .waveform import AugmentConfig, Waveform, brownian_tape_warp

# Proxy prediction tasks: (name, kind).  Age is the only regression task
# and is standardized with train-split statistics before computing the
# squared error.
PROXY_TASKS = (
    ("sex", "classification"),
    ("age", "regression"),
    ("bmi_high", "classification"),
    ("hypertension", "classification"),
    ("hba1c_high", "classification"),
    ("chol_high", "classification"),
    ("sbp_high", "classification"),
    ("prior_mace", "classification"),
    ("notch_present", "classification"),
)
TASK_NAMES = tuple(name for name, _ in PROXY_TASKS)
PROXY_BMI_THRESHOLD = 33.0
PROXY_HBA1C_THRESHOLD = 48.0
PROXY_CHOL_THRESHOLD = 7.16
PROXY_SBP_THRESHOLD = 160.0


@dataclass(frozen=True)
class ProxyTargets:
    """Per-subject task labels; NaN in ``values`` marks a missing target."""

    values: np.ndarray  # (n, n_tasks)
    age_mean: float
    age_sd: float

    def __post_init__(self):
        present = np.isfinite(self.values)
        if not present.any(axis=1).all():
            raise ValidationError("every training subject needs at least one target")

    def subset(self, idx) -> "ProxyTargets":
        return ProxyTargets(self.values[idx], self.age_mean, self.age_sd)


def proxy_targets_from_rows(rows, notch_present: dict[str, bool], age_mean=None, age_sd=None):
    """Build the task label matrix from cohort rows.

    ``notch_present`` maps subject ids to the dicrotic-notch flag derived
    from their waveform; subjects absent from it get a missing label for
    that task.  Age standardization statistics default to this sample's.
    """
    ages = np.array([r.age for r in rows if r.age is not None], dtype=float)
    if age_mean is None:
        age_mean = float(ages.mean()) if ages.size else 0.0
    if age_sd is None:
        sd = float(ages.std()) if ages.size else 1.0
        age_sd = sd if sd > 0 else 1.0

    def thresholded(value, cut):
        return np.nan if value is None else float(value > cut)

    values = np.full((len(rows), len(PROXY_TASKS)), np.nan)
    for i, row in enumerate(rows):
        notch = notch_present.get(row.subject_id)
        values[i] = [
            np.nan if row.sex is None else float(row.sex),
            np.nan if row.age is None else (row.age - age_mean) / age_sd,
            thresholded(row.bmi, PROXY_BMI_THRESHOLD),
            np.nan if row.hypertension is None else float(row.hypertension),
            thresholded(row.hba1c, PROXY_HBA1C_THRESHOLD),
            thresholded(row.total_cholesterol, PROXY_CHOL_THRESHOLD),
            thresholded(row.sbp, PROXY_SBP_THRESHOLD),
            np.nan if row.prior_mi_or_stroke is None else float(row.prior_mi_or_stroke),
            np.nan if notch is None else float(notch),
        ]
    return ProxyTargets(values=values, age_mean=age_mean, age_sd=age_sd)


@dataclass(frozen=True)
class EncoderConfig:
    input_length: int = 100
    blocks: int = 3
    channels: tuple[int, ...] = (8, 12, 16)
    embedding_dim: int = 16
    kernel_size: int = 5
    epochs: int = 80
    batch_size: int = 128
    learning_rate: float = 1e-4
    weight_decay: float = 3e-6
    dropout: float = 0.0
    optimizer: str = "adaptive"  # "adaptive" | "sgd", both with decoupled decay
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    pca_components: int = 5

    def __post_init__(self):
        if self.embedding_dim < self.pca_components:
            raise ValidationError("embedding_dim must be >= the PCA target")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if len(self.channels) != self.blocks:
            raise ValidationError("channels must list one width per block")
        if self.channels[-1] != self.embedding_dim:
            raise ValidationError("last block width must equal embedding_dim")
        if self.optimizer not in ("adaptive", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


class PulseEncoder:
    """Parameter bookkeeping plus forward/backward for the trunk and heads."""

    def __init__(self, config: EncoderConfig):
        self.config = config

    # -- parameters --

    def init_params(self, seed: int | None = None) -> dict[str, np.ndarray]:
        cfg = self.config
        rng = keyed_rng(cfg.seed if seed is None else seed, "init")
        params: dict[str, np.ndarray] = {}

        # convs feeding a norm layer carry no bias: the per-channel mean
        # subtraction would cancel it exactly, leaving a dead parameter
        def conv(name, c_in, c_out, k, bias=False):
            scale = math.sqrt(2.0 / (c_in * k))
            params[f"{name}.w"] = rng.normal(0.0, scale, size=(c_out, c_in, k))
            if bias:
                params[f"{name}.b"] = np.zeros(c_out)

        def norm(name, c):
            params[f"{name}.g"] = np.ones(c)
            params[f"{name}.b"] = np.zeros(c)

        k = cfg.kernel_size
        conv("stem.conv", 1, cfg.channels[0], k)
        norm("stem.norm", cfg.channels[0])
        c_prev = cfg.channels[0]
        for b, c in enumerate(cfg.channels):
            stride = 1 if b == 0 else 2
            conv(f"block{b}.conv1", c_prev, c, k)
            norm(f"block{b}.norm1", c)
            conv(f"block{b}.conv2", c, c, k)
            norm(f"block{b}.norm2", c)
            if c != c_prev or stride != 1:
                conv(f"block{b}.proj", c_prev, c, 1, bias=True)
            c_prev = c
        for task in TASK_NAMES:
            scale = math.sqrt(1.0 / cfg.embedding_dim)
            params[f"head.{task}.w"] = rng.normal(0.0, scale, size=(1, cfg.embedding_dim))
            params[f"head.{task}.b"] = np.zeros(1)
        return params

    # -- forward / backward --

    def forward(self, params, x, dropout_rng=None):
        """x: (n, L) waveforms -> (embedding (n, d), head outputs (n, tasks), cache)."""
        cfg = self.config
        if x.shape[1] != cfg.input_length:
            raise ValidationError(
                f"expected waveforms of length {cfg.input_length}, got {x.shape[1]}"
            )
        h = x[:, None, :]
        cache: dict = {}

        def no_bias(c_out):
            return np.zeros(c_out)

        h, cache["stem.conv"] = nn.conv1d_forward(
            h, params["stem.conv.w"], no_bias(cfg.channels[0]), stride=1
        )
        h, cache["stem.norm"] = nn.channel_norm_forward(
            h, params["stem.norm.g"], params["stem.norm.b"]
        )
        h, cache["stem.relu"] = nn.relu_forward(h)

        for b in range(cfg.blocks):
            stride = 1 if b == 0 else 2
            c = cfg.channels[b]
            identity = h
            m, cache[f"block{b}.conv1"] = nn.conv1d_forward(
                h, params[f"block{b}.conv1.w"], no_bias(c), stride
            )
            m, cache[f"block{b}.norm1"] = nn.channel_norm_forward(
                m, params[f"block{b}.norm1.g"], params[f"block{b}.norm1.b"]
            )
            m, cache[f"block{b}.relu1"] = nn.relu_forward(m)
            m, cache[f"block{b}.conv2"] = nn.conv1d_forward(
                m, params[f"block{b}.conv2.w"], no_bias(c), 1
            )
            m, cache[f"block{b}.norm2"] = nn.channel_norm_forward(
                m, params[f"block{b}.norm2.g"], params[f"block{b}.norm2.b"]
            )
            if f"block{b}.proj.w" in params:
                identity, cache[f"block{b}.proj"] = nn.conv1d_forward(
                    identity, params[f"block{b}.proj.w"], params[f"block{b}.proj.b"], stride
                )
            m = m + identity
            h, cache[f"block{b}.relu2"] = nn.relu_forward(m)

        embedding, cache["gap"] = nn.gap_forward(h)
        dropped, cache["dropout"] = nn.dropout_forward(
            embedding, cfg.dropout if dropout_rng is not None else 0.0, dropout_rng
        )
        heads = np.empty((x.shape[0], len(TASK_NAMES)))
        cache["head_in"] = dropped
        for t, task in enumerate(TASK_NAMES):
            out, _ = nn.linear_forward(
                dropped, params[f"head.{task}.w"], params[f"head.{task}.b"]
            )
            heads[:, t] = out[:, 0]
        return embedding, heads, cache

    def backward(self, params, cache, dheads):
        """Gradients of a scalar loss given d(loss)/d(head outputs)."""
        cfg = self.config
        grads = {name: np.zeros_like(p) for name, p in params.items()}
        head_in = cache["head_in"]
        demb = np.zeros_like(head_in)
        for t, task in enumerate(TASK_NAMES):
            dy = dheads[:, t : t + 1]
            dx, dw, db = nn.linear_backward(dy, head_in, params[f"head.{task}.w"])
            grads[f"head.{task}.w"] = dw
            grads[f"head.{task}.b"] = db
            demb += dx
        demb = nn.dropout_backward(demb, cache["dropout"])
        dh = nn.gap_backward(demb, cache["gap"])

        for b in reversed(range(cfg.blocks)):
            dh = nn.relu_backward(dh, cache[f"block{b}.relu2"])
            d_identity = dh
            dm = dh
            dm, dg, dbeta = nn.channel_norm_backward(dm, cache[f"block{b}.norm2"])
            grads[f"block{b}.norm2.g"] = dg
            grads[f"block{b}.norm2.b"] = dbeta
            dm, dw, _ = nn.conv1d_backward(dm, cache[f"block{b}.conv2"])
            grads[f"block{b}.conv2.w"] = dw
            dm = nn.relu_backward(dm, cache[f"block{b}.relu1"])
            dm, dg, dbeta = nn.channel_norm_backward(dm, cache[f"block{b}.norm1"])
            grads[f"block{b}.norm1.g"] = dg
            grads[f"block{b}.norm1.b"] = dbeta
            dm, dw, _ = nn.conv1d_backward(dm, cache[f"block{b}.conv1"])
            grads[f"block{b}.conv1.w"] = dw
            if f"block{b}.proj" in cache:
                dskip, dw, db = nn.conv1d_backward(d_identity, cache[f"block{b}.proj"])
                grads[f"block{b}.proj.w"] = dw
                grads[f"block{b}.proj.b"] = db
            else:
                dskip = d_identity
            dh = dm + dskip

        dh = nn.relu_backward(dh, cache["stem.relu"])
        dh, dg, dbeta = nn.channel_norm_backward(dh, cache["stem.norm"])
        grads["stem.norm.g"] = dg
        grads["stem.norm.b"] = dbeta
        _, dw, _ = nn.conv1d_backward(dh, cache["stem.conv"])
        grads["stem.conv.w"] = dw
        return grads

    def embed(self, params, waveforms: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Embeddings for (n, L) waveforms; deterministic, no dropout."""
        chunks = []
        for start in range(0, waveforms.shape[0], batch_size):
            emb, _, _ = self.forward(params, waveforms[start : start + batch_size])
            chunks.append(emb)
        return np.vstack(chunks)


# --- loss ---------------------------------------------------------------------


def multitask_loss(heads: np.ndarray, targets: ProxyTargets):
    """Mean-over-present-tasks loss, averaged over the batch.

    Classification tasks use the logistic cross-entropy of the head logit;
    the age task uses squared error on the standardized target.  Returns
    (scalar loss, per-task mean losses, d loss / d heads).
    """
    values = targets.values
    if values.shape != heads.shape:
        raise ValidationError("head outputs and targets must align")
    present = np.isfinite(values)
    if not present.any():
        raise ValidationError("no targets present")
    n = heads.shape[0]
    y = np.where(present, values, 0.0)
    per_task = np.zeros_like(heads)
    dheads = np.zeros_like(heads)
    for t, (_, kind) in enumerate(PROXY_TASKS):
        x = heads[:, t]
        if kind == "classification":
            # stable log(1 + exp(-|x|)) formulation of BCE-with-logits
            per_task[:, t] = np.maximum(x, 0.0) - x * y[:, t] + np.log1p(np.exp(-np.abs(x)))
            dheads[:, t] = 1.0 / (1.0 + np.exp(-x)) - y[:, t]
        else:
            diff = x - y[:, t]
            per_task[:, t] = diff * diff
            dheads[:, t] = 2.0 * diff
    per_task = np.where(present, per_task, 0.0)
    dheads = np.where(present, dheads, 0.0)
    n_present = present.sum(axis=1)
    sample_loss = per_task.sum(axis=1) / np.maximum(n_present, 1)
    loss = float(sample_loss.mean())
    dheads = dheads / np.maximum(n_present, 1)[:, None] / n
    with np.errstate(invalid="ignore"):
        task_means = np.where(
            present.sum(axis=0) > 0,
            per_task.sum(axis=0) / np.maximum(present.sum(axis=0), 1),
            np.nan,
        )
    per_task_mean = dict(zip(TASK_NAMES, task_means))
    return loss, per_task_mean, dheads


# --- training -------------------------------------------------------------------


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    tune_pll: float


_TUNE_SPEC_CACHE: dict[int, ModelSpec] = {}


def _tune_spec(k: int) -> ModelSpec:
    if k not in _TUNE_SPEC_CACHE:
        _TUNE_SPEC_CACHE[k] = ModelSpec(
            "embedding_select", tuple(f"pc_{i + 1}" for i in range(k))
        )
    return _TUNE_SPEC_CACHE[k]


def tune_pseudolikelihood(
    encoder: PulseEncoder, params, tune_waveforms, tune_times, tune_events, k: int = 5
) -> float:
    """Cox partial log-likelihood of k tune-set principal components."""
    emb = encoder.embed(params, tune_waveforms)
    comps = project(fit_pca(emb, n_components=k), emb)
    fit = fit_cox(_tune_spec(k), comps, tune_times, tune_events, lam=0.0)
    return fit.final_pll


def cosine_warmup_lr(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Linear warmup for ``warmup_steps`` then a cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def train(
    config: EncoderConfig,
    waveforms: np.ndarray,
    targets: ProxyTargets,
    tune_waveforms: np.ndarray,
    tune_times: np.ndarray,
    tune_events: np.ndarray,
) -> tuple[dict[str, np.ndarray], list[EpochLog]]:
    """Train the encoder; return the tune-selected checkpoint and the log.

    Deterministic for a fixed config seed: batch order, augmentation and
    dropout all derive from keyed streams.
    """
    if waveforms.shape[0] == 0 or tune_waveforms.shape[0] == 0:
        raise ValidationError("train and tune sets must be nonempty")
    encoder = PulseEncoder(config)
    params = encoder.init_params()
    n = waveforms.shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    warmup_steps = steps_per_epoch  # one epoch of linear warmup

    m_state = {k: np.zeros_like(v) for k, v in params.items()}
    v_state = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0
    log: list[EpochLog] = []
    best_pll = -np.inf
    best_params = {k: v.copy() for k, v in params.items()}

    for epoch in range(config.epochs):
        order = keyed_rng(config.seed, "shuffle", epoch).permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = _augment_batch(config, waveforms, idx, epoch)
            dropout_rng = (
                keyed_rng(config.seed, "dropout", epoch, start)
                if config.dropout > 0
                else None
            )
            _, heads, cache = encoder.forward(params, batch, dropout_rng)
            loss, _, dheads = multitask_loss(heads, targets.subset(idx))
            if not np.isfinite(loss):
                raise NumericalError(f"training loss diverged at epoch {epoch + 1}")
            epoch_loss += loss * len(idx)
            grads = encoder.backward(params, cache, dheads)
            lr = cosine_warmup_lr(step, total_steps, warmup_steps, config.learning_rate)
            _apply_update(config, params, grads, m_state, v_state, step, lr)
            step += 1

        pll = tune_pseudolikelihood(
            encoder, params, tune_waveforms, tune_times, tune_events,
            k=config.pca_components,
        )
        log.append(EpochLog(epoch + 1, epoch_loss / n, pll))
        if pll >= best_pll:  # ties break toward the later epoch
            best_pll = pll
            best_params = {k: v.copy() for k, v in params.items()}

    return best_params, log


def _augment_batch(config: EncoderConfig, waveforms, idx, epoch):
    if config.augment.apply_probability <= 0 or config.augment.magnitude == 0:
        return waveforms[idx]
    batch = np.empty((len(idx), waveforms.shape[1]))
    for j, i in enumerate(idx):
        cfg = AugmentConfig(
            magnitude=config.augment.magnitude,
            apply_probability=config.augment.apply_probability,
            seed=derive_seed(config.seed, "augment", epoch, int(i)),
        )
        batch[j] = brownian_tape_warp(Waveform(waveforms[i], 1.0), cfg).samples
    return batch


def _apply_update(config, params, grads, m_state, v_state, step, lr):
    wd = config.weight_decay
    if config.optimizer == "sgd":
        for name, p in params.items():
            p -= lr * grads[name] + lr * wd * p
        return
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    t = step + 1
    for name, p in params.items():
        g = grads[name]
        m_state[name] = b1 * m_state[name] + (1 - b1) * g
        v_state[name] = b2 * v_state[name] + (1 - b2) * g * g
        mh = m_state[name] / (1 - b1**t)
        vh = v_state[name] / (1 - b2**t)
        p -= lr * mh / (np.sqrt(vh) + eps) + lr * wd * p
