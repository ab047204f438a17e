"""Region waiting-time estimators.

Two interchangeable predictors feed the cross-region allocator: a closed-form
multi-server queue wait (Poisson arrivals, exponential service, c = agents),
and a per-region random-forest regression trained on simulated response
times. Also hosts the greedy facility-placement heuristic used to seed
simulations and initial deployments.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from . import dispatch as dispatch_mod
from . import sim as sim_mod
from .demand import IncidentChain
from .spatial import Region
from .travel import travel_time


class WaitTimeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# M/M/c queue wait

@dataclass(frozen=True)
class QueueParams:
    p: int        # servers (agents in the region)
    gamma: float  # arrivals per minute
    mu: float     # service rate per agent per minute

    def __post_init__(self):
        if self.p < 1:
            raise WaitTimeError(f"need at least one server, got {self.p}")
        if self.gamma < 0:
            raise WaitTimeError(f"negative arrival rate {self.gamma}")
        if self.mu <= 0:
            raise WaitTimeError(f"service rate must be positive, got {self.mu}")


def mmc_wait(q: QueueParams) -> float:
    """Mean queue wait in minutes (Erlang C). Unstable loads return +inf."""
    if q.gamma == 0:
        return 0.0
    rho = q.gamma / (q.p * q.mu)
    if rho >= 1.0:
        return math.inf
    a = q.gamma / q.mu  # offered load in Erlangs
    total = 1.0
    term = 1.0  # a^m / m!
    for m in range(1, q.p):
        term *= a / m
        total += term
    term_p = term * a / q.p  # a^p / p!
    p0 = 1.0 / (total + term_p / (1.0 - rho))
    lq = p0 * term_p * rho / (1.0 - rho) ** 2
    return lq / q.gamma


# ---------------------------------------------------------------------------
# greedy p-median placement

@dataclass
class PMedianInstance:
    cell_weights: dict[int, float]          # cell -> incident likelihood
    depot_ids: list[int]
    dist: dict[tuple[int, int], float]      # (cell, depot) -> distance
    p: int


def greedy_add(instance: PMedianInstance) -> tuple[list[int], float]:
    """Place p facilities one at a time, each minimizing the demand-weighted
    distance from every cell to its nearest placed facility.

    Returns the placement in insertion order and the final score.
    """
    if instance.p > len(instance.depot_ids):
        raise WaitTimeError(
            f"cannot place {instance.p} agents on {len(instance.depot_ids)} depots")
    cells = sorted(instance.cell_weights)
    chosen: list[int] = []
    best_dist = {c: math.inf for c in cells}
    score = math.inf
    for _ in range(instance.p):
        best = None
        for cand in instance.depot_ids:
            if cand in chosen:
                continue
            u = sum(instance.cell_weights[c]
                    * min(best_dist[c], instance.dist[(c, cand)]) for c in cells)
            if best is None or (u, cand) < best:
                best = (u, cand)
        score, picked = best
        chosen.append(picked)
        for c in cells:
            best_dist[c] = min(best_dist[c], instance.dist[(c, picked)])
    return chosen, score


# ---------------------------------------------------------------------------
# surrogate training data

@dataclass(frozen=True)
class SurrogateSample:
    region_id: int
    p: int
    gamma: float            # arrivals per minute seen by the region
    mean_response_s: float


def generate_training_data(region: Region, cell_rates: dict[int, float],
                           chains: list[tuple[IncidentChain, float]],
                           p_values, depots: list[sim_mod.Depot],
                           cfg: sim_mod.SimConfig) -> list[SurrogateSample]:
    """Simulate the region alone under each (chain, agent count) condition.

    Agents start at greedy p-median placements weighted by the cell rates and
    respond with greedy dispatch only (no re-allocation). Chains that produce
    zero incidents inside the region are skipped: an empty mean would
    otherwise teach the regressor that waits are free.
    """
    region_depots = [d for d in depots if d.id in region.depot_ids]
    if not region_depots:
        raise WaitTimeError(f"region {region.id} has no depots")
    depot_map = {d.id: d for d in region_depots}
    weights = {c: cell_rates.get(c, 0.0) for c in sorted(region.cell_ids)}
    dist = {(c, d.id): travel_time(cfg.travel, c, d.cell_id)
            for c in weights for d in region_depots}

    placements = {}
    for p in p_values:
        inst = PMedianInstance(cell_weights=weights,
                               depot_ids=sorted(depot_map), dist=dist, p=p)
        placements[p], _ = greedy_add(inst)

    samples = []
    for chain, gamma in chains:
        local = chain.restricted(region.cell_ids)
        if len(local) == 0:
            continue
        for p in p_values:
            assignments = [(region.id, depot_id) for depot_id in placements[p]]
            state = sim_mod.initial_state(assignments, region_depots,
                                          t0=local.horizon[0])
            records, _ = sim_mod.run(local, state, cfg,
                                     dispatch_mod.drain_policy(cfg))
            label = sum(r.response_s for r in records) / len(records)
            samples.append(SurrogateSample(region_id=region.id, p=p,
                                           gamma=gamma, mean_response_s=label))
    return samples


# ---------------------------------------------------------------------------
# random forest regression on (p, gamma)

@dataclass
class ForestHyperparams:
    n_trees: int = 150
    max_depth: int | None = None
    min_split: int = 2
    min_leaf: int = 1
    bootstrap: bool = True


@dataclass
class ForestModel:
    trees: list[dict]
    hyperparams: ForestHyperparams
    seed: int
    region_id: int = -1

    def predict(self, p: float, gamma: float) -> float:
        x = (float(p), float(gamma))
        return sum(_tree_predict(t, x) for t in self.trees) / len(self.trees)


def _tree_predict(node: dict, x) -> float:
    while "value" not in node:
        node = node["left"] if x[node["feature"]] <= node["threshold"] else node["right"]
    return node["value"]


def _best_split(X, y, feature_order, n_consider, min_leaf):
    """Best (sse, feature, threshold) scanning features in the given random
    order; keeps scanning past ``n_consider`` only while nothing valid found."""
    best = None
    for rank, f in enumerate(feature_order):
        if rank >= n_consider and best is not None:
            break
        values = np.unique(X[:, f])
        for lo, hi in zip(values[:-1], values[1:]):
            thr = (lo + hi) / 2.0
            mask = X[:, f] <= thr
            nl = int(mask.sum())
            if nl < min_leaf or len(y) - nl < min_leaf:
                continue
            yl, yr = y[mask], y[~mask]
            sse = ((yl - yl.mean()) ** 2).sum() + ((yr - yr.mean()) ** 2).sum()
            if best is None or sse < best[0]:
                best = (sse, f, thr)
    return best


def _grow_tree(X, y, depth, hp: ForestHyperparams, rng) -> dict:
    if (len(y) < hp.min_split or np.all(y == y[0])
            or (hp.max_depth is not None and depth >= hp.max_depth)):
        return {"value": float(y.mean())}
    n_features = X.shape[1]
    n_consider = max(1, round(math.sqrt(n_features)))
    order = rng.permutation(n_features)
    split = _best_split(X, y, order, n_consider, hp.min_leaf)
    if split is None:
        return {"value": float(y.mean())}
    _, f, thr = split
    mask = X[:, f] <= thr
    return {
        "feature": int(f),
        "threshold": float(thr),
        "left": _grow_tree(X[mask], y[mask], depth + 1, hp, rng),
        "right": _grow_tree(X[~mask], y[~mask], depth + 1, hp, rng),
    }


def train_forest(samples: list[SurrogateSample],
                 hyperparams: ForestHyperparams | None = None,
                 seed: int = 0) -> ForestModel:
    if len(samples) < 2:
        raise WaitTimeError(f"need at least 2 samples, got {len(samples)}")
    hp = hyperparams or ForestHyperparams()
    region_ids = {s.region_id for s in samples}
    X = np.array([(s.p, s.gamma) for s in samples], dtype=float)
    y = np.array([s.mean_response_s for s in samples], dtype=float)
    trees = []
    for i in range(hp.n_trees):
        rng = np.random.default_rng([seed, i])
        if hp.bootstrap:
            idx = rng.integers(0, len(y), size=len(y))
            Xi, yi = X[idx], y[idx]
        else:
            Xi, yi = X, y
        trees.append(_grow_tree(Xi, yi, 0, hp, rng))
    region_id = region_ids.pop() if len(region_ids) == 1 else -1
    return ForestModel(trees=trees, hyperparams=hp, seed=seed, region_id=region_id)


def predict_wait(model: ForestModel, p: int, gamma: float) -> float:
    """Predicted mean response time in seconds."""
    return model.predict(p, gamma)


# ---------------------------------------------------------------------------
# estimator fronts shared with the cross-region allocator

class QueueWaitEstimator:
    """Erlang-C wait, converted to seconds to match simulated labels."""

    def __init__(self, mu_per_min: float):
        self.mu = mu_per_min

    def wait_s(self, region_id: int, p: int, gamma: float) -> float:
        if p < 1:
            return math.inf
        w = mmc_wait(QueueParams(p=p, gamma=gamma, mu=self.mu))
        return w * 60.0 if math.isfinite(w) else math.inf


class ForestWaitEstimator:
    def __init__(self, models: dict[int, ForestModel]):
        self.models = models

    def wait_s(self, region_id: int, p: int, gamma: float) -> float:
        if p < 1:
            return math.inf
        return predict_wait(self.models[region_id], p, gamma)


# ---------------------------------------------------------------------------
# file formats

def save_samples_csv(path, samples: list[SurrogateSample]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region", "p", "gamma_per_min", "mean_response_s"])
        for s in samples:
            writer.writerow([s.region_id, s.p, repr(s.gamma), repr(s.mean_response_s)])


def load_samples_csv(path) -> list[SurrogateSample]:
    samples = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                samples.append(SurrogateSample(region_id=int(row["region"]),
                                               p=int(row["p"]),
                                               gamma=float(row["gamma_per_min"]),
                                               mean_response_s=float(row["mean_response_s"])))
            except (KeyError, ValueError) as exc:
                raise WaitTimeError(f"{path}:{lineno}: bad sample row: {exc}") from exc
    return samples


def save_forest(path, model: ForestModel) -> None:
    payload = {
        "trees": model.trees,
        "hyperparams": {
            "n_trees": model.hyperparams.n_trees,
            "max_depth": model.hyperparams.max_depth,
            "min_split": model.hyperparams.min_split,
            "min_leaf": model.hyperparams.min_leaf,
            "bootstrap": model.hyperparams.bootstrap,
        },
        "seed": model.seed,
        "region_id": model.region_id,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_forest(path) -> ForestModel:
    with open(path) as fh:
        payload = json.load(fh)
    hp = ForestHyperparams(**payload["hyperparams"])
    return ForestModel(trees=payload["trees"], hyperparams=hp,
                       seed=payload["seed"], region_id=payload.get("region_id", -1))
