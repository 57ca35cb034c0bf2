"""Loop verification network: given two scan descriptors, classify whether
they overlap and regress their relative yaw as a distribution over sector
bins (argmax bin center is the estimate, so wraparound stays continuous).

The network never sees raw clouds: each scan enters as its ring key plus
flattened descriptor matrix, and the pair additionally contributes its
column-shift cosine profile, which carries the yaw signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from deskslam import autodiff as ad
from deskslam.autodiff import Tensor, Tape, backward
from deskslam.checkpoint import load_checkpoint, save_checkpoint
from deskslam.core import Rng
from deskslam.layers import Linear
from deskslam.optim import AdamState, adam_step, exp_decay, zero_grads
from deskslam.scancontext import ScanDescriptor, shift_scores, yaw_deg_of_shift

EMBED_DIM = 128
ENC_HIDDEN = 256
HEAD_HIDDEN = 128


@dataclass
class LoopPrediction:
    overlap_prob: float
    yaw_deg: float

    def __post_init__(self):
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise ValueError("overlap_prob outside [0, 1]")
        if not 0.0 <= self.yaw_deg < 360.0:
            raise ValueError("yaw_deg outside [0, 360)")


@dataclass
class LabeledPair:
    """Training example: two descriptors, overlap flag, yaw sector when overlapping."""

    a: ScanDescriptor
    b: ScanDescriptor
    overlap: bool
    yaw_sector: int = 0


@dataclass
class LCNetConfig:
    epochs: int = 300
    base_lr: float = 5e-4
    lr_decay: float = 0.98
    batch_size: int = 32
    seed: int = 0


class LCNet:
    """Descriptor-pair encoder with overlap and yaw heads."""

    def __init__(self, rng: Rng, n_rings: int = 20, n_sectors: int = 60, dtype=np.float32):
        self.n_rings = n_rings
        self.n_sectors = n_sectors
        self.dtype = dtype
        in_dim = n_rings + n_rings * n_sectors
        self.enc1 = Linear(rng.child(0), in_dim, ENC_HIDDEN, dtype)
        self.enc2 = Linear(rng.child(1), ENC_HIDDEN, EMBED_DIM, dtype)
        self.pair = Linear(rng.child(2), 2 * EMBED_DIM + n_sectors, HEAD_HIDDEN, dtype)
        self.overlap_head = Linear(rng.child(3), HEAD_HIDDEN, 1, dtype)
        self.yaw_head = Linear(rng.child(4), HEAD_HIDDEN, n_sectors, dtype)

    def parameters(self) -> List[Tensor]:
        mods = [self.enc1, self.enc2, self.pair, self.overlap_head, self.yaw_head]
        return [p for m in mods for p in m.parameters()]

    def named_parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for name, mod in (("enc1", self.enc1), ("enc2", self.enc2), ("pair", self.pair),
                          ("overlap", self.overlap_head), ("yaw", self.yaw_head)):
            for i, p in enumerate(mod.parameters()):
                out[f"{name}.{i}"] = p
        return out

    def save(self, path) -> None:
        save_checkpoint(path, {k: v.data for k, v in self.named_parameters()})

    def load(self, path) -> None:
        stored = load_checkpoint(path)
        own = self.named_parameters()
        if set(stored) != set(own):
            raise ValueError(f"checkpoint parameter names do not match: {sorted(set(stored) ^ set(own))}")
        for k, p in own.items():
            p.data = stored[k].astype(self.dtype)

    def _encode(self, x: Tensor) -> Tensor:
        return self.enc2(ad.relu(self.enc1(x)))

    def forward_tensors(self, xa: np.ndarray, xb: np.ndarray, profile: np.ndarray):
        """Batched forward: (B, in) descriptor features -> (logit (B,1), yaw logits (B,S))."""
        ea = self._encode(Tensor(xa.astype(self.dtype)))
        eb = self._encode(Tensor(xb.astype(self.dtype)))
        h = ad.relu(self.pair(ad.concat([ea, eb, Tensor(profile.astype(self.dtype))], axis=1)))
        return self.overlap_head(h), self.yaw_head(h)


def descriptor_features(d: ScanDescriptor) -> np.ndarray:
    return np.concatenate([d.ring_key, d.matrix.reshape(-1)])


def pair_features(a: ScanDescriptor, b: ScanDescriptor):
    return descriptor_features(a), descriptor_features(b), shift_scores(a, b)


def lcnet_forward(net: LCNet, a: ScanDescriptor, b: ScanDescriptor) -> LoopPrediction:
    xa, xb, prof = pair_features(a, b)
    logit, yaw_logits = net.forward_tensors(xa[None], xb[None], prof[None])
    prob = float(1.0 / (1.0 + np.exp(-float(logit.data[0, 0]))))
    sector = int(np.argmax(yaw_logits.data[0]))
    return LoopPrediction(overlap_prob=prob, yaw_deg=yaw_deg_of_shift(sector, net.n_sectors))


def lcnet_loss(logit: Tensor, yaw_logits: Tensor, overlap: np.ndarray, yaw_sector: np.ndarray):
    """Mean binary cross-entropy on overlap plus mean cross-entropy over
    yaw bins for the overlapping pairs; total is their sum."""
    y = overlap.astype(logit.data.dtype).reshape(-1, 1)
    z = logit
    bce_terms = ad.sub(ad.softplus(z), ad.mul(z, Tensor(y)))
    l_ce = ad.tmean(bce_terms)
    pos = np.flatnonzero(overlap)
    if len(pos):
        logp = ad.log_softmax(ad.gather(yaw_logits, pos, axis=0), axis=1)
        picked = ad.gather(ad.reshape(logp, (-1,)),
                           pos_offsets(pos, yaw_sector, yaw_logits.data.shape[1]))
        l_reg = ad.neg(ad.tmean(picked))
        return ad.add(l_ce, l_reg), l_ce, l_reg
    return l_ce, l_ce, None


def pos_offsets(pos: np.ndarray, yaw_sector: np.ndarray, n_sectors: int) -> np.ndarray:
    return np.arange(len(pos)) * n_sectors + yaw_sector[pos]


def train_lcnet(pairs: Sequence[LabeledPair], config: LCNetConfig,
                net: Optional[LCNet] = None):
    """Train to convergence on labeled pairs; deterministic under the seed.

    Raises if the dataset is single-class (no decision boundary to learn).
    """
    labels = np.array([p.overlap for p in pairs], dtype=bool)
    if labels.all() or not labels.any():
        raise ValueError("training needs both overlapping and non-overlapping pairs")
    rng = Rng(config.seed)
    first = pairs[0].a
    if net is None:
        net = LCNet(rng.child(0), first.n_rings, first.n_sectors)
    xa = np.stack([descriptor_features(p.a) for p in pairs])
    xb = np.stack([descriptor_features(p.b) for p in pairs])
    prof = np.stack([shift_scores(p.a, p.b) for p in pairs])
    yaw = np.array([p.yaw_sector for p in pairs], dtype=np.int64)
    params = net.parameters()
    state = AdamState(lr=config.base_lr)
    order_rng = rng.child(1)
    log: List[dict] = []
    n = len(pairs)
    for epoch in range(config.epochs):
        state.lr = exp_decay(config.base_lr, epoch, config.lr_decay)
        order = order_rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            sel = order[start : start + config.batch_size]
            zero_grads(params)
            with Tape() as tape:
                logit, yaw_logits = net.forward_tensors(xa[sel], xb[sel], prof[sel])
                total, l_ce, l_reg = lcnet_loss(logit, yaw_logits, labels[sel], yaw[sel])
            if not np.isfinite(total.data):
                raise RuntimeError(f"NaN/Inf loss at epoch {epoch}")
            backward(tape, total)
            adam_step(state, params)
            epoch_loss += total.item()
            n_batches += 1
        log.append({"epoch": epoch, "lr": state.lr, "loss": epoch_loss / n_batches})
    return net, log


def evaluate_pairs(net: LCNet, pairs: Sequence[LabeledPair], prob_threshold: float = 0.5):
    """Overlap accuracy and circular yaw errors (deg) on the positive pairs."""
    correct = 0
    yaw_errors = []
    for p in pairs:
        pred = lcnet_forward(net, p.a, p.b)
        if (pred.overlap_prob > prob_threshold) == p.overlap:
            correct += 1
        if p.overlap:
            truth = yaw_deg_of_shift(p.yaw_sector, net.n_sectors)
            err = abs(pred.yaw_deg - truth) % 360.0
            yaw_errors.append(min(err, 360.0 - err))
    acc = correct / len(pairs)
    med = float(np.median(yaw_errors)) if yaw_errors else 0.0
    return acc, med


def evaluate_pr(predictions: Sequence[Tuple[int, int, float]],
                ground_truth_loops: set,
                thresholds: Optional[Sequence[float]] = None) -> List[dict]:
    """Pair-level precision/recall sweep.

    predictions: (frame_i, frame_j, score) triples; ground truth is a set
    of (frame_i, frame_j) pairs. At zero detections precision is reported
    as 1 by convention.
    """
    if not ground_truth_loops:
        raise ValueError("ground truth loop set is empty")
    preds = sorted(predictions, key=lambda t: (-t[2], t[0], t[1]))
    if thresholds is None:
        scores = sorted({p[2] for p in preds})
        thresholds = scores
    rows = []
    for th in thresholds:
        detected = [(i, j) for i, j, s in preds if s >= th]
        tp = sum(1 for d in detected if d in ground_truth_loops)
        fp = len(detected) - tp
        precision = tp / (tp + fp) if detected else 1.0
        recall = tp / len(ground_truth_loops)
        rows.append({"threshold": th, "precision": precision, "recall": recall,
                     "detections": len(detected)})
    return rows
