"""Gradient-free untargeted l-inf evasion attacks against the ensemble oracle.

All three attacks see the deployed interface only: a callable
``oracle(X) -> (frontend probabilities, voted labels)`` where each image in
the batch counts as one query. They optimize the margin of the frontend
probabilities, max(p_y - max_{j!=y} p_j, 0), while success is judged on the
voted label; the gap between the optimized signal and the judged output is
exactly what the ensemble defends with. Every candidate an attack queries is
first projected into the eps-box around the clean image intersected with
[0, 1], so any returned image is feasible by construction, and attacks stop
as soon as a queried point flips the voted label.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import as_image

DEFAULT_EPSILON = 8.0 / 255.0
DEFAULT_SQUARE_QUERIES = 2000

# Square-attack patch-size schedule: once the consumed fraction of the query
# budget passes each milestone, the pixel fraction p is halved once more.
SQUARE_P_MILESTONES = (0.001, 0.005, 0.02, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8)


@dataclass(frozen=True)
class AttackBudget:
    """Perturbation radius and (optional) query ceiling for one attack run."""

    epsilon: float = DEFAULT_EPSILON
    max_queries: int = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.max_queries is not None and self.max_queries < 1:
            raise ValueError("max_queries must be >= 1 when set")


@dataclass(frozen=True)
class SpsaParams:
    delta: float = 0.01
    learning_rate: float = 0.01
    batch_size: int = 256
    max_iters: int = 100

    def __post_init__(self):
        if self.delta <= 0 or self.learning_rate <= 0:
            raise ValueError("delta and learning_rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (antithetic pairs)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True)
class NattackParams:
    population: int = 300
    sigma: float = 0.1
    learning_rate: float = 0.02
    iters: int = 100

    def __post_init__(self):
        if self.population < 1 or self.iters < 1:
            raise ValueError("population and iters must be >= 1")
        if self.sigma < 0 or self.learning_rate <= 0:
            raise ValueError("sigma must be >= 0 and learning_rate > 0")


@dataclass(frozen=True)
class SquareParams:
    p_init: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.p_init <= 1.0:
            raise ValueError("p_init must lie in (0, 1]")


@dataclass
class AttackOutcome:
    """Result of attacking one image."""

    x_adv: np.ndarray
    success: bool
    queries: int
    linf_distance: float
    final_label: int


def project_linf(x_adv, x, eps):
    """Clamp x_adv into the eps-box around x intersected with [0, 1]; idempotent."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_adv.shape != x.shape and x_adv.shape[-x.ndim:] != x.shape:
        raise ValueError(f"shape mismatch: {x_adv.shape} vs {x.shape}")
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def margin_loss(probs, y):
    """Frontend-probability margin max(p_y - max_{j!=y} p_j, 0), per row."""
    probs = np.atleast_2d(probs)
    py = probs[:, y]
    others = probs.copy()
    others[:, y] = -np.inf
    return np.maximum(py - others.max(axis=1), 0.0)


def _outcome(x, x_adv, success, queries, label):
    dist = float(np.abs(x_adv - x).max()) if x_adv is not x else 0.0
    return AttackOutcome(x_adv, bool(success), int(queries), dist, int(label))


def _initial_check(oracle, x, y):
    probs, labels = oracle(x[None])
    return int(labels[0]) != y, int(labels[0])


def spsa_attack(oracle, x, y, budget, params=None, seed=0):
    """Simultaneous-perturbation gradient estimation with sign steps.

    Per iteration: batch_size/2 antithetic Rademacher pairs probe the margin
    loss at x_adv +- delta*V (projected into the feasible box), the averaged
    two-point estimate gives a descent direction, and the iterate takes a
    learning_rate-sized sign step followed by projection. One extra query per
    iteration re-evaluates the iterate for early stopping.
    """
    params = params or SpsaParams()
    x = as_image(x)
    eps = budget.epsilon
    queries = 1
    done, label = _initial_check(oracle, x, y)
    if done or eps == 0.0:
        return _outcome(x, x, done, queries, label)

    rng = np.random.default_rng(seed)
    pairs = params.batch_size // 2
    x_adv = x.copy()
    label_adv = label
    for _ in range(params.max_iters):
        cost = 2 * pairs + 1
        if budget.max_queries is not None and queries + cost > budget.max_queries:
            break
        V = rng.integers(0, 2, size=(pairs,) + x.shape).astype(np.float64) * 2.0 - 1.0
        probes = np.concatenate(
            [
                project_linf(x_adv + params.delta * V, x, eps),
                project_linf(x_adv - params.delta * V, x, eps),
            ]
        )
        probs, labels = oracle(probes)
        queries += probes.shape[0]
        flipped = np.nonzero(labels != y)[0]
        if flipped.size:
            j = int(flipped[0])
            return _outcome(x, probes[j], True, queries, labels[j])
        losses = margin_loss(probs, y)
        diff = (losses[:pairs] - losses[pairs:]) / (2.0 * params.delta)
        ghat = np.mean(diff[:, None, None, None] * V, axis=0)
        x_adv = project_linf(x_adv - params.learning_rate * np.sign(ghat), x, eps)
        probs, labels = oracle(x_adv[None])
        queries += 1
        label_adv = int(labels[0])
        if label_adv != y:
            return _outcome(x, x_adv, True, queries, label_adv)
    return _outcome(x, x_adv, False, queries, label_adv)


def nattack(oracle, x, y, budget, params=None, seed=0):
    """Distribution-based search: a Gaussian over squash-space perturbations.

    The mean vector mu lives in the pre-squash space of g(z) = (tanh(z)+1)/2;
    candidates g(z0 + mu + sigma*eps_i) are projected into the feasible box
    and scored on the frontend margin loss, and mu moves along the z-scored
    population estimate (the natural-evolution update). mu starts at zero, so
    with population 1 and sigma 0 the candidate never moves. Constants beyond
    the four documented parameters: rewards are z-scored with a 1e-7 floor on
    the std, and the squash input is scaled by (1 - 1e-6) to keep arctanh
    finite.
    """
    params = params or NattackParams()
    x = as_image(x)
    eps = budget.epsilon
    queries = 1
    done, label = _initial_check(oracle, x, y)
    if done or eps == 0.0:
        return _outcome(x, x, done, queries, label)

    rng = np.random.default_rng(seed)
    z0 = np.arctanh((2.0 * x - 1.0) * (1.0 - 1e-6))
    mu = np.zeros_like(x)
    best_loss = np.inf
    best = x.copy()
    best_label = label
    for _ in range(params.iters):
        if budget.max_queries is not None and queries + params.population > budget.max_queries:
            break
        E = rng.standard_normal(size=(params.population,) + x.shape)
        cands = project_linf(0.5 * (np.tanh(z0 + mu + params.sigma * E) + 1.0), x, eps)
        probs, labels = oracle(cands)
        queries += cands.shape[0]
        flipped = np.nonzero(labels != y)[0]
        if flipped.size:
            j = int(flipped[0])
            return _outcome(x, cands[j], True, queries, labels[j])
        losses = margin_loss(probs, y)
        j = int(losses.argmin())
        if losses[j] < best_loss:
            best_loss, best, best_label = losses[j], cands[j], int(labels[j])
        if params.sigma > 0.0:
            rewards = -losses
            A = (rewards - rewards.mean()) / (rewards.std() + 1e-7)
            mu = mu + (params.learning_rate / (params.population * params.sigma)) * np.tensordot(
                A, E, axes=1
            )
    return _outcome(x, best, False, queries, best_label)


def _square_p_factor(frac_used):
    k = sum(frac_used >= t for t in SQUARE_P_MILESTONES)
    return 0.5**k


def square_attack(oracle, x, y, budget, params=None, seed=0):
    """Randomized search over eps-extremal square patches.

    Starts from vertical +-eps stripes, then repeatedly proposes one square
    window of the image reset to x +- eps (one sign per channel), accepting a
    proposal only if it strictly lowers the frontend margin loss; the loss of
    the accepted sequence is therefore non-increasing. The square side shrinks
    as the query budget is consumed, following the milestone table
    SQUARE_P_MILESTONES applied to p_init.
    """
    params = params or SquareParams()
    x = as_image(x)
    eps = budget.epsilon
    max_q = budget.max_queries or DEFAULT_SQUARE_QUERIES
    queries = 1
    done, label = _initial_check(oracle, x, y)
    if done or eps == 0.0:
        return _outcome(x, x, done, queries, label)

    rng = np.random.default_rng(seed)
    c, w, h = x.shape
    stripes = rng.choice([-eps, eps], size=(c, 1, h))
    x_adv = np.clip(x + stripes, 0.0, 1.0)
    probs, labels = oracle(x_adv[None])
    queries += 1
    label_adv = int(labels[0])
    if label_adv != y:
        return _outcome(x, x_adv, True, queries, label_adv)
    loss_cur = float(margin_loss(probs, y)[0])

    proposals_left = 10 * max_q  # bounds the no-op resampling loop
    while queries < max_q and proposals_left > 0:
        proposals_left -= 1
        p = params.p_init * _square_p_factor(queries / max_q)
        s = int(round(np.sqrt(p * w * h)))
        s = max(1, min(s, w, h))
        r0 = int(rng.integers(0, w - s + 1))
        c0 = int(rng.integers(0, h - s + 1))
        sgn = rng.choice([-eps, eps], size=(c, 1, 1))
        window = np.clip(x[:, r0 : r0 + s, c0 : c0 + s] + sgn, 0.0, 1.0)
        if np.array_equal(window, x_adv[:, r0 : r0 + s, c0 : c0 + s]):
            continue  # proposal would not change the iterate; skip the query
        x_new = x_adv.copy()
        x_new[:, r0 : r0 + s, c0 : c0 + s] = window
        probs, labels = oracle(x_new[None])
        queries += 1
        if int(labels[0]) != y:
            return _outcome(x, x_new, True, queries, labels[0])
        loss_new = float(margin_loss(probs, y)[0])
        if loss_new < loss_cur:
            x_adv, loss_cur = x_new, loss_new
            label_adv = int(labels[0])
    return _outcome(x, x_adv, False, queries, label_adv)


_ATTACKS = {
    "spsa": (spsa_attack, SpsaParams),
    "nattack": (nattack, NattackParams),
    "square": (square_attack, SquareParams),
}

ATTACK_KINDS = tuple(_ATTACKS)


def default_params(kind):
    if kind not in _ATTACKS:
        raise ValueError(f"unknown attack kind {kind!r}; expected one of {ATTACK_KINDS}")
    return _ATTACKS[kind][1]()


def run_attack_suite(e, dataset, kind, budget, params=None, seed=0, verify=True):
    """Attack every image of (X, y); one AttackOutcome per image.

    Deterministic given the suite seed (per-image seeds are derived from it).
    Attacks only ever touch the ensemble through its query oracle; the suite
    cross-checks each outcome's query count against the oracle counter delta
    and, when verify is set, re-judges the success flag with an independent
    (uncounted) prediction.
    """
    if kind not in _ATTACKS:
        raise ValueError(f"unknown attack kind {kind!r}; expected one of {ATTACK_KINDS}")
    attack_fn, params_cls = _ATTACKS[kind]
    if params is None:
        params = params_cls()
    X, y = dataset
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise ValueError("attack suite needs at least one image")

    outcomes = []
    for i in range(X.shape[0]):
        child_seed = np.random.SeedSequence([int(seed), 0xA77C, i]).generate_state(1)[0]
        before = e.query_count
        out = attack_fn(e.oracle_batch, X[i], int(y[i]), budget, params, seed=int(child_seed))
        used = e.query_count - before
        if used != out.queries:
            raise RuntimeError(
                f"query accounting mismatch on image {i}: outcome says {out.queries}, "
                f"oracle counted {used}"
            )
        if verify:
            judged = int(e.predict(out.x_adv[None])[0])
            if out.success != (judged != int(y[i])):
                raise RuntimeError(
                    f"success flag mismatch on image {i}: flag={out.success}, "
                    f"re-judged label {judged} vs true {int(y[i])}"
                )
        outcomes.append(out)
    return outcomes
