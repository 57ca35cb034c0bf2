"""Local-map denoising network: two-scale neighborhood sampling, shared MLP
feature extraction with max-pooling, LSTM fusion of the two scales, and a
head predicting per-point displacement plus normal.

Training minimizes the sum of three losses: a curvature-weighted Chamfer
term, a repulsion term that keeps the output spread out, and a normal
consistency term. All three are differentiable through the tape engine;
nearest-neighbor match indices are recomputed every evaluation but carry
no gradient.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from deskslam import autodiff as ad
from deskslam import octree
from deskslam.autodiff import Tensor, Tape, backward
from deskslam.checkpoint import load_checkpoint, save_checkpoint
from deskslam.core import PointCloud, Rng, rot_z
from deskslam.layers import LSTMCell, MLP
from deskslam.optim import AdamState, adam_step, step_decay, zero_grads

NEIGHBOR_SAMPLES = 16
MLP_WIDTHS = (16, 64, 256)
FUSED_DIM = 256


@dataclass
class AugmentConfig:
    """Training-time augmentation: yaw rotation, isotropic scale, jitter."""

    yaw_range: Tuple[float, float] = (0.0, 2.0 * np.pi)
    scale_range: Tuple[float, float] = (0.9, 1.1)
    perturb_std: float = 0.01


@dataclass
class NoisySample:
    """A noisy cloud paired with its clean ground truth.

    The clean cloud must carry normals and normalized curvature; both
    clouds must be non-empty.
    """

    noisy: PointCloud
    clean: PointCloud
    scene_id: str = ""

    def __post_init__(self):
        if len(self.noisy) == 0 or len(self.clean) == 0:
            raise ValueError("noisy and clean clouds must be non-empty")
        if self.clean.normals is None or self.clean.curvatures is None:
            raise ValueError("clean cloud needs normals and curvatures")


@dataclass
class DenoiseConfig:
    """Training and sampling knobs; defaults follow the build decisions."""

    epochs: int = 200
    base_lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 60
    r_small: float = 0.3
    r_large: float = 1.0
    repulsion_k: int = 4
    repulsion_lambda: float = 100.0
    swap_geo_normalizers: bool = False
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    seed: int = 0


class DenoiseNet:
    """Parameter container + forward pass."""

    def __init__(self, rng: Rng, dtype=np.float32):
        self.dtype = dtype
        widths = [3, *MLP_WIDTHS]
        self.mlp = MLP(rng.child(0), widths, dtype=dtype, relu_last=True)
        self.lstm = LSTMCell(rng.child(1), FUSED_DIM, FUSED_DIM, dtype=dtype)
        self.head = MLP(rng.child(2), [FUSED_DIM, 64, 6], dtype=dtype,
                        relu_last=False, zero_init_last=True)
        # zero-initialized head => identity displacement; normal defaults to +z
        self.head.layers[-1].b.data[5] = 1.0

    def parameters(self) -> List[Tensor]:
        return self.mlp.parameters() + self.lstm.parameters() + self.head.parameters()

    def named_parameters(self) -> Dict[str, Tensor]:
        names: Dict[str, Tensor] = {}
        for i, p in enumerate(self.mlp.parameters()):
            names[f"mlp.{i}"] = p
        for i, p in enumerate(self.lstm.parameters()):
            names[f"lstm.{i}"] = p
        for i, p in enumerate(self.head.parameters()):
            names[f"head.{i}"] = p
        return names

    def save(self, path) -> None:
        save_checkpoint(path, {k: v.data for k, v in self.named_parameters()})

    def load(self, path) -> None:
        stored = load_checkpoint(path)
        own = self.named_parameters()
        if set(stored) != set(own):
            raise ValueError(f"checkpoint parameter names do not match: {sorted(set(stored) ^ set(own))}")
        for k, p in own.items():
            if stored[k].shape != p.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {k}")
            p.data = stored[k].astype(self.dtype)

    # ---------------------------------------------------------------- forward

    def pooled_features(self, offsets: np.ndarray) -> Tensor:
        """(N, 2, 16, 3) neighbor offsets -> fused-scale features (N, 2, 256)."""
        n = offsets.shape[0]
        flat = Tensor(offsets.reshape(-1, 3).astype(self.dtype))
        feats = self.mlp(flat)                                    # (N*2*16, 256)
        feats = ad.reshape(feats, (n, 2, NEIGHBOR_SAMPLES, FUSED_DIM))
        return ad.max_over_axis(feats, 2)                         # (N, 2, 256)

    def forward_tensors(self, cloud: PointCloud, tree: octree.Octree, rng: Rng,
                        r_small: float = 0.3, r_large: float = 1.0):
        """Differentiable forward: returns (denoised (N,3), normals (N,3)) tensors."""
        pts = cloud.points
        offsets = gather_two_scale_offsets(cloud, tree, rng, r_small, r_large)
        pooled = self.pooled_features(offsets)                    # (N, 2, 256)
        small = ad.reshape(ad.slice_axis(pooled, 1, 0, 1), (len(pts), FUSED_DIM))
        large = ad.reshape(ad.slice_axis(pooled, 1, 1, 1), (len(pts), FUSED_DIM))
        h = Tensor(np.zeros((len(pts), FUSED_DIM), dtype=self.dtype))
        c = Tensor(np.zeros((len(pts), FUSED_DIM), dtype=self.dtype))
        h, c = self.lstm(small, h, c)
        h, c = self.lstm(large, h, c)
        out = self.head(h)                                        # (N, 6)
        disp = ad.slice_axis(out, 1, 0, 3)
        raw_n = ad.slice_axis(out, 1, 3, 3)
        denoised = ad.add(Tensor(pts.astype(self.dtype)), disp)
        norm = ad.sqrt(ad.tsum(ad.square(raw_n), axis=1, keepdims=True) + 1e-12)
        normals = ad.div(raw_n, norm)
        return denoised, normals

    def forward(self, cloud: PointCloud, tree: octree.Octree, rng: Rng,
                r_small: float = 0.3, r_large: float = 1.0):
        """Inference: denoised PointCloud (same cardinality) + unit normals."""
        denoised_t, normals_t = self.forward_tensors(cloud, tree, rng, r_small, r_large)
        normals = normals_t.data.astype(np.float64)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return PointCloud(denoised_t.data.astype(np.float64)), normals


# ---------------------------------------------------------------------------
# neighborhood sampling
# ---------------------------------------------------------------------------


def sample_two_scales(cloud: PointCloud, tree: octree.Octree, i: int,
                      r_small: float, r_large: float, rng: Rng) -> Tuple[np.ndarray, np.ndarray]:
    """16 neighbor indices per scale around point i.

    Sampling is without replacement when the ball holds at least 16
    candidates, with replacement otherwise; the query point itself is not
    a candidate. An empty ball falls back to 16 copies of the nearest
    neighbor (with a warning).
    """
    if not r_small < r_large:
        raise ValueError(f"need r_small < r_large, got {r_small} >= {r_large}")
    return (
        _sample_ball(cloud, tree, i, r_small, rng),
        _sample_ball(cloud, tree, i, r_large, rng),
    )


def _sample_ball(cloud: PointCloud, tree: octree.Octree, i: int, radius: float, rng: Rng) -> np.ndarray:
    cand = tree.radius_indices(cloud.points[i], radius)
    cand = np.sort(cand[cand != i])
    if len(cand) == 0:
        warnings.warn(f"empty ball of radius {radius} around point {i}; using nearest neighbor")
        knn_idx, _ = tree.knn_arrays(cloud.points[i], 2)
        fallback = knn_idx[knn_idx != i]
        nn = int(fallback[0]) if len(fallback) else i
        return np.full(NEIGHBOR_SAMPLES, nn, dtype=np.int64)
    if len(cand) >= NEIGHBOR_SAMPLES:
        return rng.choice(cand, size=NEIGHBOR_SAMPLES, replace=False)
    return rng.choice(cand, size=NEIGHBOR_SAMPLES, replace=True)


def gather_two_scale_offsets(cloud: PointCloud, tree: octree.Octree, rng: Rng,
                             r_small: float, r_large: float) -> np.ndarray:
    """(N, 2, 16, 3) relative neighbor coordinates for the whole cloud."""
    pts = cloud.points
    n = len(pts)
    offsets = np.empty((n, 2, NEIGHBOR_SAMPLES, 3), dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # isolated points fall back silently here
        for i in range(n):
            s_idx, l_idx = sample_two_scales(cloud, tree, i, r_small, r_large, rng)
            offsets[i, 0] = pts[s_idx] - pts[i]
            offsets[i, 1] = pts[l_idx] - pts[i]
    return offsets


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_geo(pred: Tensor, gt_points: np.ndarray, gt_sigma: np.ndarray,
             swap_normalizers: bool = False) -> Tensor:
    """Curvature-weighted bidirectional Chamfer loss.

    Each side accumulates sigma * (1 - exp(-||match distance||)); the
    ground-truth sum is divided by the predicted count and the predicted
    sum by the ground-truth count (pass swap_normalizers to flip). The
    predicted side borrows sigma from its matched ground-truth point.
    Match indices are constants for the gradient.
    """
    if gt_sigma is None:
        raise ValueError("ground-truth curvature (sigma) is required for the geometric loss")
    pred_np = np.asarray(pred.data, dtype=np.float64)
    n_pred, n_gt = len(pred_np), len(gt_points)
    if n_pred == 0 or n_gt == 0:
        raise ValueError("both clouds must be non-empty")
    pred_tree = octree.build(pred_np)
    gt_tree = octree.build(gt_points)
    m_gt2pred, _ = pred_tree.knn_batch(gt_points, 1)   # per GT point: nearest pred
    m_pred2gt, _ = gt_tree.knn_batch(pred_np, 1)       # per pred point: nearest GT
    m_gt2pred = m_gt2pred[:, 0]
    m_pred2gt = m_pred2gt[:, 0]

    sig = np.asarray(gt_sigma, dtype=pred.data.dtype)
    gt_const = Tensor(gt_points.astype(pred.data.dtype))

    d1 = _pair_dist(ad.gather(pred, m_gt2pred), gt_const)
    term1 = ad.tsum(ad.mul(Tensor(sig), 1.0 - ad.exp(ad.neg(d1))))

    d2 = _pair_dist(pred, ad.gather(gt_const, m_pred2gt))
    term2 = ad.tsum(ad.mul(Tensor(sig[m_pred2gt]), 1.0 - ad.exp(ad.neg(d2))))

    div1, div2 = (n_gt, n_pred) if swap_normalizers else (n_pred, n_gt)
    return ad.add(term1 * (1.0 / div1), term2 * (1.0 / div2))


def _pair_dist(a: Tensor, b: Tensor) -> Tensor:
    d2 = ad.tsum(ad.square(ad.sub(a, b)), axis=1)
    return ad.sqrt(d2 + 1e-20)  # guard keeps the sqrt gradient finite at d = 0


def loss_repulsion(pred: Tensor, k: int, lam: float) -> Tensor:
    """Sum over points of exp(-lambda * d^2) to each of the K nearest
    other predicted points; coincident clouds score exactly N*K."""
    if k < 1:
        raise ValueError("repulsion needs K >= 1")
    if lam <= 0.0:
        raise ValueError("repulsion lambda must be positive")
    pred_np = np.asarray(pred.data, dtype=np.float64)
    n = len(pred_np)
    if k >= n:
        raise ValueError(f"repulsion K={k} must be smaller than the cloud ({n} points)")
    tree = octree.build(pred_np)
    idx, _ = tree.knn_batch(pred_np, k + 1)
    nbr = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = idx[i][idx[i] != i]  # k+1 results minus the self match
        nbr[i] = row[:k]
    center = ad.gather(pred, np.repeat(np.arange(n), k))
    neighbor = ad.gather(pred, nbr.reshape(-1))
    d2 = ad.tsum(ad.square(ad.sub(center, neighbor)), axis=1)
    return ad.tsum(ad.exp(d2 * (-lam)))


def loss_normal(pred_normals: Tensor, gt_normals: np.ndarray) -> Tensor:
    """Sum of squared differences after per-point sign alignment."""
    gt = np.asarray(gt_normals)
    if pred_normals.data.shape != gt.shape:
        raise ValueError(f"normal count mismatch: {pred_normals.data.shape} vs {gt.shape}")
    dots = np.einsum("ij,ij->i", np.asarray(pred_normals.data, dtype=np.float64), gt)
    signs = np.where(dots < 0.0, -1.0, 1.0).astype(pred_normals.data.dtype)
    aligned = ad.mul(pred_normals, Tensor(signs[:, None]))
    return ad.tsum(ad.square(ad.sub(aligned, Tensor(gt.astype(pred_normals.data.dtype)))))


def loss_total(pred: Tensor, pred_normals: Tensor, gt_points: np.ndarray,
               gt_sigma: np.ndarray, gt_normals: np.ndarray, k: int, lam: float,
               swap_normalizers: bool = False):
    geo = loss_geo(pred, gt_points, gt_sigma, swap_normalizers)
    rep = loss_repulsion(pred, k, lam)
    nrm = loss_normal(pred_normals, gt_normals)
    return ad.add(ad.add(geo, rep), nrm), (geo, rep, nrm)


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Plain symmetric Chamfer: mean NN distance a->b plus b->a."""
    ta, tb = octree.build(a), octree.build(b)
    _, d_ab = tb.knn_batch(a, 1)
    _, d_ba = ta.knn_batch(b, 1)
    return float(d_ab.mean() + d_ba.mean())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def augment_sample(sample: NoisySample, rng: Rng, cfg: AugmentConfig) -> NoisySample:
    """Shared yaw+scale on both clouds; Gaussian jitter on the noisy one."""
    yaw = rng.uniform(*cfg.yaw_range)
    scale = rng.uniform(*cfg.scale_range)
    R = rot_z(yaw)
    noisy_pts = scale * (sample.noisy.points @ R.T)
    noisy_pts = noisy_pts + rng.normal(0.0, cfg.perturb_std, size=noisy_pts.shape)
    clean_pts = scale * (sample.clean.points @ R.T)
    clean_normals = sample.clean.normals @ R.T
    return NoisySample(
        noisy=PointCloud(noisy_pts),
        clean=PointCloud(clean_pts, normals=clean_normals, curvatures=sample.clean.curvatures),
        scene_id=sample.scene_id,
    )


def train(dataset: List[NoisySample], config: DenoiseConfig,
          net: Optional[DenoiseNet] = None):
    """Train on the given samples; returns (net, per-epoch loss log).

    Deterministic under a fixed config seed. A NaN loss aborts with the
    offending epoch and sample.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = Rng(config.seed)
    if net is None:
        net = DenoiseNet(rng.child(0))
    params = net.parameters()
    state = AdamState(lr=config.base_lr)
    sample_rng = rng.child(1)
    augment_rng = rng.child(2)
    log: List[dict] = []
    for epoch in range(config.epochs):
        state.lr = step_decay(config.base_lr, epoch, config.lr_decay_factor, config.lr_decay_every)
        sums = np.zeros(3)
        for si, sample in enumerate(dataset):
            s = augment_sample(sample, augment_rng, config.augment) if config.augment else sample
            tree = octree.build(s.noisy.points)
            zero_grads(params)
            with Tape() as tape:
                pred, normals = net.forward_tensors(s.noisy, tree, sample_rng,
                                                    config.r_small, config.r_large)
                total, (geo, rep, nrm) = loss_total(
                    pred, normals, s.clean.points, s.clean.curvatures, s.clean.normals,
                    config.repulsion_k, config.repulsion_lambda, config.swap_geo_normalizers,
                )
            if not np.isfinite(total.data):
                raise RuntimeError(f"NaN/Inf loss at epoch {epoch}, sample {si} ({s.scene_id})")
            backward(tape, total)
            adam_step(state, params)
            sums += (geo.item(), rep.item(), nrm.item())
        log.append({
            "epoch": epoch,
            "lr": state.lr,
            "loss_geo": sums[0] / len(dataset),
            "loss_repulsion": sums[1] / len(dataset),
            "loss_normal": sums[2] / len(dataset),
        })
    return net, log
