"""1-D CNN predicting knot intervals (exp head) or knee classes (softmax head)."""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAGIC = b"KNOTCAST"
CHANNELS = (4, 8, 16, 32)


class ShapeError(ValueError):
    pass


class ConvNet(nn.Module):
    """Conv blocks (kernel 4, stride 2, padding 1; BN; ReLU; dropout) + linear head."""

    def __init__(
        self,
        n_out: int,
        in_len: int = 128,
        head: str = "regression",
        channels=CHANNELS,
        dropout: float = 0.2,
        in_channels: int = 3,
    ):
        super().__init__()
        if head not in ("regression", "classification"):
            raise ValueError(f"unknown head {head!r}")
        if in_len % (2 ** len(channels)):
            raise ShapeError(f"input length {in_len} not divisible by 2**{len(channels)}")
        self.n_out = n_out
        self.in_len = in_len
        self.in_channels = in_channels
        self.head = head
        self.channels = tuple(channels)
        self.dropout = float(dropout)
        layers = []
        c_in = in_channels
        for c_out in self.channels:
            layers += [
                nn.Conv1d(c_in, c_out, kernel_size=4, stride=2, padding=1),
                nn.BatchNorm1d(c_out),
                nn.ReLU(),
                nn.Dropout(dropout),
            ]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.flat_size = c_in * (in_len // 2 ** len(self.channels))
        self.linear = nn.Linear(self.flat_size, n_out)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv1d, nn.Linear)):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm1d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def set_dropout(self, p: float):
        self.dropout = float(p)
        for m in self.modules():
            if isinstance(m, nn.Dropout):
                m.p = p

    def _check(self, x):
        want = (self.in_channels, self.in_len)
        if x.ndim != 3 or tuple(x.shape[1:]) != want:
            raise ShapeError(f"expected input of shape (batch, {want[0]}, {want[1]}), got {tuple(x.shape)}")

    def logits(self, x):
        self._check(x)
        return self.linear(self.features(x).flatten(1))

    def forward(self, x):
        z = self.logits(x)
        if self.head == "regression":
            return torch.exp(z)
        return torch.softmax(z, dim=1)

    def shape_chain(self, x) -> list[tuple[int, ...]]:
        """Per-block output shapes (without batch), then flatten and output size."""
        self._check(x)
        shapes = []
        h = x
        for m in self.features:
            h = m(h)
            if isinstance(m, nn.Dropout):
                shapes.append(tuple(h.shape[1:]))
        shapes.append((h.flatten(1).shape[1],))
        shapes.append((self.linear(h.flatten(1)).shape[1],))
        return shapes


def set_mode(net: ConvNet, mode: str) -> ConvNet:
    """train: batch stats + dropout; eval: running stats, no dropout; mc: running stats + dropout."""
    if mode == "train":
        net.train()
    elif mode == "eval":
        net.eval()
    elif mode == "mc":
        net.eval()
        for m in net.modules():
            if isinstance(m, nn.Dropout):
                m.train()
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return net


def loss_regression(pred_h, true_cycles):
    """MAE between cumulative predicted intervals and observed knot cycles."""
    as_np = not torch.is_tensor(pred_h)
    pred_h = torch.as_tensor(pred_h, dtype=torch.float64) if as_np else pred_h
    true_cycles = torch.as_tensor(true_cycles, dtype=pred_h.dtype)
    if pred_h.shape != true_cycles.shape:
        raise ShapeError(f"prediction shape {tuple(pred_h.shape)} != label shape {tuple(true_cycles.shape)}")
    loss = torch.mean(torch.abs(torch.cumsum(pred_h, dim=-1) - true_cycles))
    return float(loss) if as_np else loss


def loss_classification(logits, labels):
    return nn.functional.cross_entropy(logits, labels)


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs: int = 1000
    seed: int = 0
    loss: str = "mae"
    mc_samples: int = 100
    val_fraction: float = 0.1
    patience: int = 100
    optimizer: str = "adam"
    dropout: float = 0.2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.loss not in ("mae", "ce"):
            raise ValueError(f"unknown loss {self.loss!r}")


OPTIMIZERS = {"adam": torch.optim.Adam, "radam": torch.optim.RAdam}


def make_optimizer(net: nn.Module, config: TrainConfig):
    try:
        cls = OPTIMIZERS[config.optimizer]
    except KeyError:
        raise ValueError(f"unknown optimizer {config.optimizer!r}; choose from {sorted(OPTIMIZERS)}") from None
    return cls(net.parameters(), lr=config.learning_rate)


def backward_and_step(net: ConvNet, optimizer, xb, yb, config: TrainConfig) -> float:
    """One reverse-mode gradient evaluation and optimizer step on a batch."""
    if len(xb) == 0:
        raise ValueError("empty batch")
    set_mode(net, "train")
    optimizer.zero_grad()
    if net.head == "regression":
        loss = loss_regression(net(xb), yb)
    else:
        loss = loss_classification(net.logits(xb), yb)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss {float(loss.detach())}")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@dataclass
class KnotModel:
    """Trained network plus the input standardisation it expects."""

    net: ConvNet
    mean: np.ndarray
    std: np.ndarray
    n_points: int = 128
    input_cycles: int = 1
    extra: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.net.n_out

    def tensor(self, x) -> torch.Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        z = (x - self.mean[None, :, None]) / self.std[None, :, None]
        return torch.as_tensor(z, dtype=next(self.net.parameters()).dtype)

    def predict(self, x) -> np.ndarray:
        """Eval-mode knot cycles (regression) or class probabilities."""
        set_mode(self.net, "eval")
        with torch.no_grad():
            out = self.net(self.tensor(x)).double().numpy()
        return np.cumsum(out, axis=1) if self.net.head == "regression" else out


@dataclass
class McPrediction:
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    std: np.ndarray
    samples: np.ndarray

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def predict_mc(model: KnotModel, x, t_samples: int = 100, seed: int = 0, level: float = 0.95) -> McPrediction:
    """MC-dropout knot cycles: mean, empirical CI and std over ``t_samples`` passes."""
    if t_samples < 2:
        raise ValueError("t_samples must be >= 2")
    net = set_mode(model.net, "mc")
    xt = model.tensor(x)
    draws = []
    with torch.random.fork_rng(devices=[]), torch.no_grad():
        torch.manual_seed(seed)
        for _ in range(t_samples):
            draws.append(torch.cumsum(net(xt), dim=1).double().numpy())
    set_mode(net, "eval")
    s = np.stack(draws)  # (T, n, K)
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(s, [a, 1.0 - a], axis=0)
    mean = s.mean(axis=0)
    return McPrediction(mean, np.minimum(lo, mean), np.maximum(hi, mean), s.std(axis=0), s)


def classify_knee(model: KnotModel, x):
    """Argmax knee class with its probability vector."""
    if model.net.head != "classification" or model.net.n_out != 3:
        raise ValueError("classify_knee needs a 3-way classification model")
    p = model.predict(x)
    names = np.array(["C1", "C2", "C3"])
    return names[np.argmax(p, axis=1)], p


def standardisation(inputs: np.ndarray):
    mean = inputs.mean(axis=(0, 2))
    std = inputs.std(axis=(0, 2))
    std[std == 0] = 1.0
    return mean, std


def train(inputs, labels, config: TrainConfig | None = None, head: str = "regression", n_out=None, init=None):
    """Mini-batch training with shuffling and early stopping on a validation split.

    ``inputs`` has shape (n, 3, L). Regression ``labels`` are knot cycles
    (n, K); classification labels are class indices (n,).
    ``init`` resumes from an existing KnotModel with a matching shape.
    Returns the trained model and a list of (epoch, train_loss, val_loss).
    """
    cfg = config or TrainConfig()
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(inputs)
    if n == 0 or len(labels) != n:
        raise ValueError("inputs and labels must be non-empty and aligned")
    if head == "regression":
        if labels.ndim != 2:
            raise ValueError("regression labels must be (n, K)")
        n_out = labels.shape[1]
        intervals = np.diff(labels, axis=1, prepend=0.0)
        if np.any(intervals <= 0):
            raise ValueError("knot cycles must be positive and strictly increasing")
    else:
        n_out = n_out or 3

    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    perm = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n)) if n >= 10 else 0
    val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])

    if init is not None:
        if (init.net.n_out, init.net.in_len, init.net.head) != (n_out, inputs.shape[2], head):
            raise ValueError(
                f"cannot resume: model has K={init.net.n_out}, length {init.net.in_len}, head {init.net.head}; "
                f"data needs K={n_out}, length {inputs.shape[2]}, head {head}"
            )
        net = ConvNet(n_out, in_len=init.net.in_len, head=head, channels=init.net.channels, dropout=cfg.dropout)
        net.load_state_dict(init.net.state_dict())
        mean, std = init.mean, init.std
    else:
        mean, std = standardisation(inputs[tr_idx])
        net = ConvNet(n_out, in_len=inputs.shape[2], head=head, dropout=cfg.dropout)
    if head == "regression" and init is None:
        # start the exp head at the mean observed interval of each knot
        with torch.no_grad():
            net.linear.bias.copy_(torch.as_tensor(np.log(intervals[tr_idx].mean(axis=0))))
    model = KnotModel(net, mean, std, n_points=inputs.shape[2])
    xt = model.tensor(inputs)
    yt = torch.as_tensor(labels, dtype=torch.float32 if head == "regression" else torch.long)
    opt = make_optimizer(net, cfg)

    def val_loss():
        idx = val_idx if n_val else tr_idx
        set_mode(net, "eval")
        with torch.no_grad():
            if head == "regression":
                return float(loss_regression(net(xt[idx]), yt[idx]))
            return float(loss_classification(net.logits(xt[idx]), yt[idx]))

    history = []
    best, best_state, stale = np.inf, None, 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(tr_idx)
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            if len(idx) < 2:  # batch-norm needs two samples
                continue
            losses.append(backward_and_step(net, opt, xt[idx], yt[idx], cfg) * len(idx))
        tr = float(np.sum(losses) / len(order))
        vl = val_loss()
        history.append((epoch, tr, vl))
        if vl < best:
            best, stale = vl, 0
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    if best_state is not None:
        net.load_state_dict(best_state)
    set_mode(net, "eval")
    return model, history


# -- serialisation -----------------------------------------------------------


def save_model(model: KnotModel, path) -> None:
    """Versioned JSON header followed by a little-endian float32 parameter blob."""
    state = model.net.state_dict()
    params, blob = [], io.BytesIO()
    offset = 0
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        params.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": str(t.dtype)})
        blob.write(arr.tobytes())
        offset += arr.size
    header = {
        "schema_version": SCHEMA_VERSION,
        "K": model.net.n_out,
        "n_points": model.n_points,
        "input_cycles": model.input_cycles,
        "head_type": model.net.head,
        "in_len": model.net.in_len,
        "channels": list(model.net.channels),
        "dropout": model.net.dropout,
        "normalization": {"mean": model.mean.tolist(), "std": model.std.tolist()},
        "extra": model.extra,
        "params": params,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        f.write(blob.getvalue())


def read_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a model file")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(
            f"{path}: model schema version {header.get('schema_version')} != supported {SCHEMA_VERSION}"
        )
    return header


def load_model(path) -> KnotModel:
    header = read_header(path)
    with open(path, "rb") as f:
        f.seek(len(MAGIC))
        (n,) = struct.unpack("<Q", f.read(8))
        f.seek(n, 1)
        blob = np.frombuffer(f.read(), dtype="<f4")
    net = ConvNet(
        header["K"],
        in_len=header["in_len"],
        head=header["head_type"],
        channels=header["channels"],
        dropout=header.get("dropout", 0.2),
    )
    state = {}
    for p in header["params"]:
        size = int(np.prod(p["shape"])) if p["shape"] else 1
        arr = blob[p["offset"] : p["offset"] + size].reshape(p["shape"])
        dtype = torch.long if p["dtype"] == "torch.int64" else torch.float32
        state[p["name"]] = torch.as_tensor(arr.copy()).to(dtype)
    net.load_state_dict(state)
    set_mode(net, "eval")
    norm = header["normalization"]
    return KnotModel(
        net,
        np.array(norm["mean"]),
        np.array(norm["std"]),
        n_points=header["n_points"],
        input_cycles=header["input_cycles"],
        extra=header.get("extra", {}),
    )


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
