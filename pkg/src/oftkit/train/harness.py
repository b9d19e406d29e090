"""Training loop, run logs and the desk-scale experiments."""

import configparser
import csv
import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .. import adapter as adp
from ..errors import DivergenceError, ModeError
from ..matcore import column_norms
from .model import Layer, LowRankDelta, ToyModel
from .optim import Adam, SGD, make_optimizer

DIVERGENCE_LOSS = 1e6
TOY_DIM = 16  # input width of the toy regressor's adapted layer


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and adapter settings for one run.

    ``lr`` defaults to 1e-3, sized for the toy tasks here rather than for
    large pretrained models.
    """

    lr: float = 1e-3
    steps: int = 500
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    mode: str = "oft"
    r: int = 4
    shared: bool = False
    eps_prime: float = None
    rank: int = 4
    log_every: int = 1
    batch_size: int = 0  # 0 means full batch

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.steps < 0 or self.log_every < 1 or self.batch_size < 0:
            raise ValueError("steps/batch_size must be >= 0 and log_every >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in adp.MODES + ("additive",):
            raise ModeError(f"unknown mode {self.mode!r}")
        if (self.mode == "coft") != (self.eps_prime is not None):
            raise ModeError("eps_prime must be given exactly when mode is coft")

    @classmethod
    def from_file(cls, path):
        """Read ``key = value`` lines (``#`` comments allowed) into a config."""
        with open(path) as fh:
            return cls.from_text(fh.read())

    @classmethod
    def from_text(cls, text):
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.read_string("[run]\n" + text)
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in parser["run"].items():
            key = key.replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _parse_value(types[key], raw)
        return cls(**kwargs)


def _parse_value(typ, raw):
    raw = raw.strip()
    if typ is bool or typ == "bool":
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if typ is int or typ == "int":
        return int(raw)
    if typ is float or typ == "float":
        return None if raw.lower() == "none" else float(raw)
    return raw


@dataclass
class LogRecord:
    step: int
    loss: float
    he_rel_diff: list
    q_norm: list
    r_dev: list


class RunLog:
    """Per-logged-step records of a training run.

    The CSV view reduces multi-layer fields to their maximum over adapted
    layers.
    """

    columns = ("step", "loss", "he_rel_diff", "q_norm", "r_dev")

    def __init__(self, label=""):
        self.label = label
        self.records = []

    def append(self, rec):
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("log steps must increase")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name):
        vals = [getattr(r, name) for r in self.records]
        if name in ("he_rel_diff", "q_norm", "r_dev"):
            return np.array([max(v) if v else 0.0 for v in vals])
        return np.array(vals)

    def rows(self):
        return [tuple(self.column(c)[i].item() for c in self.columns) for i in range(len(self))]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    def summary(self):
        if not self.records:
            return {"label": self.label, "num_records": 0}
        last = self.records[-1]
        return {
            "label": self.label,
            "num_records": len(self),
            "final_step": last.step,
            "final_loss": last.loss,
            "max_he_rel_diff": float(self.column("he_rel_diff").max()),
            "max_q_norm": float(self.column("q_norm").max()),
            "max_r_dev": float(self.column("r_dev").max()),
        }

    def write_json(self, path, **extra):
        with open(path, "w") as fh:
            json.dump({**self.summary(), **extra}, fh, indent=2)


def snapshot(model, step, x, y):
    idx = model.adapted()
    devs = [model.deviations(i) for i in idx]
    return LogRecord(
        step=step,
        loss=model.loss(x, y),
        he_rel_diff=[rep.rel_diff for rep in model.energy_reports()],
        q_norm=[q for q, _ in devs],
        r_dev=[r for _, r in devs],
    )


def project_coft(model):
    return model.map_adapters(lambda a: adp.coft_project(a) if a.mode == "coft" else a)


def step(model, cfg, batch, opt=None, mask=None, step_index=0):
    """One optimizer step on the adapter parameters.

    Returns ``(new_model, loss)`` where ``loss`` is evaluated before the
    update. ``mask`` selects which entries of the parameter vector may move.
    Coft adapters are projected back onto their ball afterwards.
    """
    x, y = batch
    opt = make_optimizer(cfg) if opt is None else opt
    loss, g = model.loss_and_grad(x, y)
    if not np.isfinite(loss) or loss > DIVERGENCE_LOSS or not np.all(np.isfinite(g)):
        raise DivergenceError(step_index, loss)
    if mask is not None:
        g = np.where(mask, g, 0.0)
    p = model.params()
    new = opt.update(p, g)
    if mask is not None:
        new = np.where(mask, new, p)
    return project_coft(model.with_params(new)), loss


def fit(model, cfg, x, y, label="", mask=None):
    """Run ``cfg.steps`` steps, logging every ``cfg.log_every`` and at the end."""
    opt = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    log = RunLog(label)
    n = x.shape[1]
    for s in range(cfg.steps + 1):
        if s % cfg.log_every == 0 or s == cfg.steps:
            log.append(snapshot(model, s, x, y))
        if s == cfg.steps:
            break
        if cfg.batch_size and cfg.batch_size < n:
            idx = rng.choice(n, cfg.batch_size, replace=False)
            batch = (x[:, idx], y[:, idx])
        else:
            batch = (x, y)
        model, _ = step(model, cfg, batch, opt, mask=mask, step_index=s)
    return model, log


# ---------------------------------------------------------------------------
# pretrained toy regression model


def random_rotation(d, angle, rng):
    """Orthogonal ``d x d`` matrix ``expm(angle * K)`` for a random unit skew ``K``."""
    from scipy.linalg import expm

    k = rng.normal(size=(d, d))
    k = k - k.T
    return expm(angle * k / np.linalg.norm(k))


def pretrain(layers, x, y, steps, lr, seed=0):
    """Fit base weights and biases with Adam; returns frozen layers."""
    model = ToyModel(layers, seed=seed)
    shapes = [(l.w0.shape, l.bias.shape) for l in model.layers]
    p = np.concatenate([np.concatenate([l.w0.ravel(), l.bias]) for l in model.layers])
    opt = Adam(lr)

    def unpack(vec):
        out, k = [], 0
        for layer, (ws, bs) in zip(model.layers, shapes):
            m = ws[0] * ws[1]
            out.append(replace(layer, w0=vec[k:k + m].reshape(ws), bias=vec[k + m:k + m + bs[0]]))
            k += m + bs[0]
        return out

    for _ in range(steps):
        cur = ToyModel(unpack(p), seed=seed)
        _, grads = cur.loss_and_grad(x, y, base=True)
        g = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
        p = opt.update(p, g)
    return unpack(p)


@dataclass(frozen=True)
class ToyTask:
    x: np.ndarray
    y: np.ndarray
    x_ft: np.ndarray
    y_ft: np.ndarray
    base: tuple


def make_toy_task(seed=0, d=TOY_DIM, hidden=12, d_out=8, samples=256, shift=1.5, pretrain_steps=3000):
    """Pretrained 2-layer relu regressor plus a shifted finetuning task.

    Pretraining targets come from a random relu teacher. The finetuning
    teacher sees its inputs rotated by a fixed orthogonal matrix of angle
    ``shift``, a shift that an input-side rotation of the first layer can
    absorb but a low-rank additive update can only approximate.
    """
    rng = np.random.default_rng(seed)
    t1 = rng.normal(0, 1 / np.sqrt(d), (d, hidden))
    t2 = rng.normal(0, 1 / np.sqrt(hidden), (hidden, d_out))

    def teacher(x):
        return t2.T @ np.maximum(t1.T @ x, 0.0)

    x = rng.normal(size=(d, samples))
    x_ft = rng.normal(size=(d, samples))
    rot = random_rotation(d, shift, rng)
    layers = [
        Layer(rng.normal(0, 1 / np.sqrt(d), (d, hidden)), activation="relu"),
        Layer(rng.normal(0, 1 / np.sqrt(hidden), (hidden, d_out))),
    ]
    base = tuple(pretrain(layers, x, teacher(x), pretrain_steps, 1e-2, seed))
    return ToyTask(x, teacher(x), x_ft, teacher(rot.T @ x_ft), base)


def attach(task, cfg, layer=0, seed=None):
    """Toy model with a fresh adapter (or additive delta) on one layer."""
    layers = list(task.base)
    w0 = layers[layer].w0
    d, n = w0.shape
    if cfg.mode == "additive":
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        layers[layer] = replace(layers[layer], delta=LowRankDelta.init(d, n, cfg.rank, rng))
    else:
        a = adp.Adapter.fresh(d, n, cfg.r, cfg.mode, cfg.shared, cfg.eps_prime)
        layers[layer] = replace(layers[layer], adapter=a)
    return ToyModel(layers, seed=cfg.seed, task=f"toy-shift-{cfg.mode}")


def run_finetune(cfg, task=None):
    task = make_toy_task(cfg.seed) if task is None else task
    model = attach(task, cfg)
    return fit(model, cfg, task.x_ft, task.y_ft, label=cfg.mode)


def run_energy_drift_experiment(seed=0, steps=500, lr=1e-2, r=1, rank=4, log_every=1, task=None):
    """OFT versus a rank-``rank`` additive update on the same layer.

    Returns ``(oft_log, additive_log)``. The two runs share task, optimizer
    and step budget; only the parameterization of the first layer differs.
    """
    task = make_toy_task(seed) if task is None else task
    common = dict(lr=lr, steps=steps, seed=seed, log_every=log_every, r=r, rank=rank)
    _, oft_log = run_finetune(TrainConfig(mode="oft", **common), task)
    _, add_log = run_finetune(TrainConfig(mode="additive", **common), task)
    return oft_log, add_log


def matched_index(oft_log, add_log):
    """First additive-run record whose loss reaches the OFT run's final loss.

    Falls back to the last record if the additive run never gets there.
    """
    target = oft_log[-1].loss
    losses = add_log.column("loss")
    hit = np.flatnonzero(losses <= target)
    return int(hit[0]) if hit.size else len(add_log) - 1


def post_stage_magnitude_fit(model, cfg, x, y):
    """Fit only the per-neuron log-scales, keeping every rotation frozen.

    Adapters not already in ``rescaled_oft`` mode are converted (scales start
    at 1, so the model output is unchanged). Returns ``(model, log)``.
    """
    model = model.map_adapters(lambda a: a if a.mode == "rescaled_oft" else a.with_mode("rescaled_oft"))
    mask = np.concatenate([
        np.r_[np.zeros(l.trainable.num_skew, bool), np.ones(l.trainable.n, bool)]
        if l.adapter is not None else np.zeros(l.trainable.num_params, bool)
        for l in (model.layers[i] for i in model.adapted())
    ] or [np.zeros(0, bool)])
    return fit(model, cfg, x, y, label="magnitude-fit", mask=mask)


# ---------------------------------------------------------------------------
# angle versus magnitude reconstruction


def smooth_patterns(n, rng, size=8, blobs=3):
    """Non-negative ``size x size`` images made of Gaussian blobs, unit L2 norm.

    Returned as a ``size*size x n`` matrix, one image per column.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    out = np.zeros((size * size, n))
    for k in range(n):
        img = np.zeros((size, size))
        for _ in range(blobs):
            cy, cx = rng.uniform(0, size - 1, 2)
            sigma = rng.uniform(0.8, 2.0)
            img += rng.uniform(0.3, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        out[:, k] = img.ravel() / np.linalg.norm(img)
    return out


def make_autoencoder(rng, dim=64, hidden=48):
    # encoder columns start at unit norm
    enc = rng.normal(size=(dim, hidden))
    enc /= column_norms(enc)
    dec = rng.normal(0, 0.01 / np.sqrt(hidden), (hidden, dim))
    return [Layer(enc, activation="relu"), Layer(dec)]


def reconstruction_errors(layers, x):
    out = {}
    for rule in ("inner", "magnitude", "cosine"):
        first = replace(layers[0], feature=rule)
        xhat = ToyModel([first] + list(layers[1:])).forward(x)
        out[rule] = float(np.mean((xhat - x) ** 2))
    return {"mse_inner": out["inner"], "mse_angle": out["cosine"], "mse_magnitude": out["magnitude"]}


def run_fig2_experiment(seed=0, samples=512, hidden=48, steps=1500, lr=5e-3):
    """Train an MLP autoencoder with inner-product features, then swap the rule.

    Returns the reconstruction MSE (on the training images) of the inner
    product, magnitude-only and angle-only first-layer features, for the
    untrained and the trained network.
    """
    rng = np.random.default_rng(seed)
    x = smooth_patterns(samples, rng)
    layers = make_autoencoder(rng, x.shape[0], hidden)
    untrained = reconstruction_errors(layers, x)
    trained_layers = pretrain(layers, x, x, steps, lr, seed)
    trained = reconstruction_errors(trained_layers, x)
    model = ToyModel(trained_layers)
    if not np.isfinite(model.loss(x, x)) or model.loss(x, x) > DIVERGENCE_LOSS:
        raise DivergenceError(steps, model.loss(x, x))
    return {**trained, "untrained": untrained, "seed": seed}
