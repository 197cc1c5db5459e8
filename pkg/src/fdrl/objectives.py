"""
FDRL loss terms, the dynamic global/local factor and the total objective.

All cross-entropy terms are per-sample means so the trade-off weights do not
depend on batch size. The local alignment loss enters the total objective as
the mean over classes; the per-class values also feed the dynamic factor.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError
from .model import (
    LatentPack,
    class_probabilities,
    encode,
    fuse,
    global_domain_logits,
    local_domain_logits,
    modality_disc_logits,
    modality_labels,
    predict_fine,
)

log = logging.getLogger(__name__)

TERMS = ("L_task", "L_g", "L_l", "L_p", "L_d", "L_f", "L_total")


def loss_global_align(S_a, S_t, disc, lam):
    S = dc.concat_rows([S_a, S_t])
    return dc.cross_entropy(global_domain_logits(S, disc, lam), modality_labels(S_a.rows, S_t.rows))


def loss_local_align(S_a, S_t, probs_a, probs_t, discs, lam, return_logits=False):
    """Returns (sum over classes, [per-class loss]) as scalar tensors.

    Each per-class term is the mean over all 2B rows; with ``return_logits``
    the per-class logit arrays are appended for subdomain bookkeeping.
    """
    probs = np.concatenate([np.asarray(probs_a, float), np.asarray(probs_t, float)], axis=0)
    if probs.shape[1] != len(discs):
        raise ConfigError(f"{probs.shape[1]} class probabilities but {len(discs)} local discriminators")
    S = dc.concat_rows([S_a, S_t])
    y_m = modality_labels(S_a.rows, S_t.rows)
    logits = local_domain_logits(S, probs, discs, lam)
    per_class = [dc.cross_entropy(z, y_m) for z in logits]
    if return_logits:
        return dc.sum_scalars(per_class), per_class, [z.data for z in logits]
    return dc.sum_scalars(per_class), per_class


def row_cross_entropy(logits, labels):
    """Per-row cross-entropy of a plain logit array."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(labels)), labels]


def subdomain_loss_sums(logits, probs, y_m):
    """Class-mass-weighted CE sums: sum_i p_ic * ce_ic for each class c.

    Divided by the class mass sum_i p_ic this is the discriminator loss over
    the samples of category c, which is what the local A-distance measures.
    """
    return np.array([float(np.dot(probs[:, c], row_cross_entropy(z, y_m))) for c, z in enumerate(logits)])


def loss_orthogonal(pack):
    """||S_a^T P_a||_F^2 + ||S_t^T P_t||_F^2, each divided by B^2."""
    B = pack.batch
    terms = [dc.frobenius_sq(dc.matmul(dc.transpose(S), P)) for S, P in ((pack.S_a, pack.P_a), (pack.S_t, pack.P_t))]
    return dc.scale(dc.add(*terms), 1.0 / (B * B))


def loss_modality_disc(pack, disc):
    P = dc.concat_rows([pack.P_a, pack.P_t])
    return dc.cross_entropy(modality_disc_logits(P, disc), modality_labels(pack.batch, pack.batch))


def loss_disparity(pack, disc):
    """(L_p, L_d): modality discrimination of the private codes and orthogonality."""
    return loss_modality_disc(pack, disc), loss_orthogonal(pack)


def loss_predictor(pack, pred, y_e):
    S = dc.elementwise_sum(pack.S_a, pack.S_t)
    losses = [dc.cross_entropy(predict_fine(x, pred), y_e) for x in (S, pack.P_a, pack.P_t)]
    return dc.scale(dc.sum_scalars(losses), 1.0 / 3.0)


def loss_total(terms, mu, cfg):
    """Weighted composition of the FDRL terms.

    ``terms`` maps term names to scalars (tensors or floats); a missing or
    ``None`` entry is a disabled term and contributes nothing.
    """
    for name in ("alpha", "beta", "gamma"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0")
    parts = [terms["L_task"]]

    def add(weight, name):
        value = terms.get(name)
        if value is not None and weight != 0:
            parts.append(value * weight)

    add(cfg.alpha * (1.0 - mu), "L_g")
    add(cfg.alpha * mu, "L_l")
    add(cfg.beta, "L_p")
    add(cfg.beta, "L_d")
    add(cfg.gamma, "L_f")
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


# ---------------------------------------------------------------------------
# dynamic factor
# ---------------------------------------------------------------------------

def a_distance(loss):
    """Proxy A-distance 2(1 - 2L) with L clamped into [0, 0.5]."""
    return 2.0 * (1.0 - 2.0 * min(max(float(loss), 0.0), 0.5))


@dataclass
class DynamicFactorState:
    classes: int
    mu: float = 0.5
    global_sum: float = 0.0
    global_count: int = 0
    local_sum: np.ndarray = None
    local_count: int = 0
    class_mass: np.ndarray = None
    d_A_global: float = float("nan")
    d_A_local_mean: float = float("nan")
    d_A_local: np.ndarray = None
    min_class_mass: float = 1e-6

    def __post_init__(self):
        self.reset()

    def reset(self):
        self.global_sum = 0.0
        self.global_count = 0
        self.local_sum = np.zeros(self.classes)
        self.local_count = 0
        self.class_mass = np.zeros(self.classes)

    def accumulate(self, n, L_g=None, local_sums=None, mass=None):
        """Add one batch.

        ``n`` rows entered the global discriminator with mean loss ``L_g``;
        ``local_sums[c]`` is the class-probability-weighted loss sum of
        subdomain c and ``mass[c]`` the matching probability mass.
        """
        if L_g is not None:
            self.global_sum += float(L_g) * n
            self.global_count += n
        if local_sums is not None:
            self.local_sum += np.asarray(local_sums, float)
            self.class_mass += np.asarray(mass, float)
            self.local_count += n

    @property
    def has_data(self):
        return self.global_count > 0 and self.local_count > 0

    def subdomain_losses(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.class_mass > 0, self.local_sum / np.maximum(self.class_mass, 1e-300), np.nan)

    def update_mu(self):
        """Recompute mu from the epoch accumulators, then reset them."""
        if not self.has_data:
            log.warning("dynamic factor: no accumulated losses, keeping mu=%g", self.mu)
            self.reset()
            return self.mu
        L_g = self.global_sum / self.global_count
        observed = self.class_mass >= self.min_class_mass
        L_l = self.subdomain_losses()
        d_g = a_distance(L_g)
        d_l = np.array([a_distance(v) if ok else np.nan for v, ok in zip(L_l, observed)])
        self.d_A_global = d_g
        self.d_A_local = d_l
        if not observed.any():
            log.warning("dynamic factor: every subdomain empty this epoch, keeping mu=%g", self.mu)
            self.reset()
            return self.mu
        d_l_mean = float(d_l[observed].mean())
        self.d_A_local_mean = d_l_mean
        denom = d_g + d_l_mean
        if denom == 0.0:
            log.info("dynamic factor: zero A-distance denominator, keeping mu=%g", self.mu)
        else:
            self.mu = min(max(d_g / denom, 0.0), 1.0)
        self.reset()
        return self.mu


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    L_task: float = 0.0
    L_g: float = 0.0
    L_l: float = 0.0
    L_p: float = 0.0
    L_d: float = 0.0
    L_f: float = 0.0
    L_total: float = 0.0
    L_l_per_class: list = field(default_factory=list)
    mu: float = 0.5
    lam: float = 0.0
    class_mass: list = field(default_factory=list)
    subdomain_sums: list = field(default_factory=list)

    def terms(self):
        return {name: getattr(self, name) for name in TERMS}


def effective_mu(cfg, mu):
    """With only one alignment branch enabled, that branch takes the full alpha weight."""
    g, l = cfg.term_active("alignment_global"), cfg.term_active("alignment_local")
    if g and not l:
        return 0.0
    if l and not g:
        return 1.0
    return mu


def compute_losses(model, H_a, H_t, y_e, cfg, mu, lam):
    """Forward every enabled branch. Returns (L_total tensor, LossReport, pack)."""
    H_a = H_a if isinstance(H_a, Tensor) else Tensor(H_a)
    H_t = H_t if isinstance(H_t, Tensor) else Tensor(H_t)
    y_e = np.asarray(y_e, dtype=np.int64)
    pack = encode(H_a, H_t, model.shared, model.priv_a, model.priv_t)
    mu = effective_mu(cfg, mu)
    C = model.classes
    report = LossReport(mu=mu, lam=lam, L_l_per_class=[0.0] * C, class_mass=[0.0] * C, subdomain_sums=[0.0] * C)

    _, logits = fuse(pack, model.fusion)
    terms = {"L_task": dc.cross_entropy(logits, y_e)}

    if cfg.term_active("alignment_global"):
        terms["L_g"] = loss_global_align(pack.S_a, pack.S_t, model.global_disc, lam)
    if cfg.term_active("alignment_local"):
        probs_a = class_probabilities(pack.S_a, model.predictor)
        probs_t = class_probabilities(pack.S_t, model.predictor)
        L_sum, per_class, logits = loss_local_align(pack.S_a, pack.S_t, probs_a, probs_t,
                                                    model.local_discs, lam, return_logits=True)
        terms["L_l"] = dc.scale(L_sum, 1.0 / C)
        probs = np.concatenate([probs_a, probs_t])
        report.L_l_per_class = [t.item() for t in per_class]
        report.class_mass = list(probs.sum(axis=0))
        report.subdomain_sums = list(subdomain_loss_sums(logits, probs, modality_labels(pack.batch, pack.batch)))
    if cfg.term_active("disparity_adv"):
        terms["L_p"] = loss_modality_disc(pack, model.modality_disc)
    if cfg.term_active("disparity_orth"):
        terms["L_d"] = loss_orthogonal(pack)
    if cfg.term_active("predictor"):
        terms["L_f"] = loss_predictor(pack, model.predictor, y_e)

    total = loss_total(terms, mu, cfg)
    for name, t in terms.items():
        setattr(report, name, t.item())
    report.L_total = total.item()
    return total, report, pack


# ---------------------------------------------------------------------------
# loss log
# ---------------------------------------------------------------------------

def log_columns(classes):
    return ["step", "epoch", *TERMS, "mu", "lambda"] + [f"L_l_c{c}" for c in range(classes)]


def report_row(step, epoch, report):
    row = [step, epoch] + [repr(float(getattr(report, t))) for t in TERMS]
    row += [repr(float(report.mu)), repr(float(report.lam))]
    row += [repr(float(v)) for v in report.L_l_per_class]
    return row


def write_loss_log(path, rows, classes):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(log_columns(classes))
        w.writerows(rows)


def read_loss_log(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()} for r in reader]


# ---------------------------------------------------------------------------
# finite-difference checks for the loss terms
# ---------------------------------------------------------------------------

def _fixture(rng, B=4, d_in=5, d=4, classes=3, heads=2):
    from .model import FDRLModel
    model = FDRLModel.init(d_in, d, classes, heads=heads, seed=int(rng.integers(1 << 30)))
    # nonzero biases keep small or dead-row inputs off the ReLU kink at 0
    for name, p in model.parameters().items():
        if name.endswith(("b1", "b2", ".b")):
            p.data = rng.uniform(-0.5, 0.5, size=p.shape)
    H_a = rng.uniform(-1, 1, size=(B, d_in))
    H_t = rng.uniform(-1, 1, size=(B, d_in))
    y_e = rng.integers(0, classes, size=B)
    return model, H_a, H_t, y_e


def _min_relu_input(root):
    """Smallest |pre-activation| over every ReLU in the graph of ``root``."""
    smallest = np.inf
    for node in dc._topological_order(root):
        if node.op == "relu":
            smallest = min(smallest, float(np.abs(node._parents[0].data).min()))
    return smallest


def _check_term(rng, build, select, margin=1e-3, attempts=50):
    # redraw until no ReLU input sits within ``margin`` of its kink, where
    # central differences with step 1e-5 would straddle the corner
    for _ in range(attempts):
        model, H_a, H_t, y_e = _fixture(rng)

        def loss():
            pack = encode(Tensor(H_a), Tensor(H_t), model.shared, model.priv_a, model.priv_t)
            return build(model, pack, y_e)

        params = list(select(model))
        for p in params:
            p.requires_grad = True
        if _min_relu_input(loss()) >= margin:
            break
    return dc.gradcheck(loss, params)


def _encoder_params(model):
    for enc in (model.shared, model.priv_a, model.priv_t):
        yield from enc.named("e").values()


@dc.register_check("loss_global_align")
def _check_global(rng):
    # identity in place of reversal so finite differences see the same function
    return _check_term(
        rng,
        lambda m, p, y: loss_global_align(p.S_a, p.S_t, m.global_disc, None),
        lambda m: [*m.shared.named("s").values(), *m.global_disc.named("g").values()],
    )


@dc.register_check("loss_local_align")
def _check_local(rng):
    def build(m, p, y):
        pa = class_probabilities(p.S_a, m.predictor)
        pt = class_probabilities(p.S_t, m.predictor)
        return loss_local_align(p.S_a, p.S_t, pa, pt, m.local_discs, None)[0]

    # probabilities are constants, so the predictor is not among the checked params
    model_params = lambda m: [*m.local_discs[0].named("l").values(), *m.local_discs[1].named("l").values()]
    return _check_term(rng, build, model_params)


@dc.register_check("loss_modality_disc")
def _check_modality(rng):
    return _check_term(
        rng,
        lambda m, p, y: loss_modality_disc(p, m.modality_disc),
        lambda m: [*m.priv_a.named("a").values(), *m.priv_t.named("t").values(),
                   *m.modality_disc.named("m").values()],
    )


@dc.register_check("loss_orthogonal")
def _check_orth(rng):
    return _check_term(rng, lambda m, p, y: loss_orthogonal(p), lambda m: list(_encoder_params(m)))


@dc.register_check("loss_predictor")
def _check_pred(rng):
    return _check_term(
        rng,
        lambda m, p, y: loss_predictor(p, m.predictor, y),
        lambda m: [*_encoder_params(m), *m.predictor.named("p").values()],
    )


@dc.register_check("loss_task")
def _check_task(rng):
    return _check_term(
        rng,
        lambda m, p, y: dc.cross_entropy(fuse(p, m.fusion)[1], y),
        lambda m: [*_encoder_params(m), *m.fusion.named("f").values()],
    )
