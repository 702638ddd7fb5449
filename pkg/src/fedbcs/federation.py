"""Round orchestration: broadcast, local training, uploads, aggregation.

Also houses the convergence monitor: smoothness/variance/prototype-norm
estimation from a recorded step trace, the learning-rate and round-count
calculators, and the per-round descent diagnostic. All monitor outputs are
estimates from finite traces, not certificates.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .checkpoint import state_bytes
from .data import augment_pair, default_styles, make_federation_data
from .errors import (ConfigError, ContractError, EstimationError,
                     NumericsError, TheoryRegimeError, TrainingError)
from .losses import batch_alignment_terms, dice_loss
from .network import SegNet, SegNetConfig
from .prototypes import PrototypeAccumulator, PrototypeSet
from .server import GlobalPrototypeSet, run_server_round

_METHODS = ("fedbcs", "fedavg", "fedbcs-no-fsr", "fedbcs-no-cdpa")


@dataclass
class FederationConfig:
    method: str = "fedbcs"
    client_count: int = 4
    rounds: int = 60
    local_epochs: int = 1
    batch_size: int = 6
    optimizer: str = "sgd"
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    tau: float = 0.4
    # the prototype weight must respect the descent ceiling tau*|grad|^2/(EG);
    # at the default 64x64 scale anything near 0.1 blows past it
    lambda_c: float = 0.01
    seed: int = 0
    image_size: int = 64
    train_per_client: int = 12
    test_per_client: int = 8
    finch_metric: str = "cosine"
    finch_levels: int = 1
    parallel: bool = False
    checked: bool = True
    augment: bool = False
    precision: str = "f64"  # f32 roughly halves runtime at reduced accuracy
    eval_every: int = 1

    def validate(self) -> "FederationConfig":
        if self.method not in _METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {_METHODS}")
        if self.client_count < 1 or self.rounds < 1 or self.local_epochs < 1:
            raise ConfigError("client_count, rounds and local_epochs must be >= 1")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ConfigError("learning_rate must be positive, batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.lambda_c < 0 or self.weight_decay < 0:
            raise ConfigError("lambda_c and weight_decay must be nonnegative")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        return self

    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def fsr_enabled(self) -> bool:
        return self.method in ("fedbcs", "fedbcs-no-cdpa")

    @property
    def cdpa_enabled(self) -> bool:
        return self.method in ("fedbcs", "fedbcs-no-fsr")

    @property
    def effective_lambda_c(self) -> float:
        return self.lambda_c if self.cdpa_enabled else 0.0

    def steps_per_round(self, sample_count: int) -> int:
        return self.local_epochs * math.ceil(sample_count / self.batch_size)


@dataclass
class ClientState:
    client_id: int
    dataset: object
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ContractError("client needs at least one sample")


def make_model(config: FederationConfig) -> SegNet:
    model = SegNet(SegNetConfig(input_channels=1, class_count=2), seed=config.seed)
    model.set_fsr_frozen(not config.fsr_enabled)
    return model


def client_rng(config: FederationConfig, client_id: int, round_index: int):
    return np.random.default_rng(
        np.random.SeedSequence((config.seed, client_id, round_index)))


# ---------------------------------------------------------------------------
# optimizers (fresh per round; clients restart from the broadcast params)

class SGD:
    """Plain SGD with coupled L2 decay (decay folded into the gradient)."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            p.data -= self.lr * g


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data


def make_optimizer(params, config: FederationConfig):
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate, config.weight_decay)
    return SGD(params, config.learning_rate, config.weight_decay)


# ---------------------------------------------------------------------------
# local training

@dataclass
class ClientRoundStats:
    client_id: int
    mean_dice_loss: float
    mean_contra: float
    mean_consis: float
    mean_total: float
    grad_norm: float
    upload_count: int


@dataclass
class StepTrace:
    """Per-step record from one client, feeding estimate_theory_params."""
    thetas: list = field(default_factory=list)
    full_grads: list = field(default_factory=list)
    epoch_minibatch_grads: list = field(default_factory=list)
    proto_norms: list = field(default_factory=list)


def _flat_params(model) -> np.ndarray:
    state = model.state()
    return np.concatenate([state[k].ravel() for k in sorted(state)])


def _flat_grads(model) -> np.ndarray:
    params = {p.identifier: p for p in model.parameters()}
    out = []
    for name in sorted(params):
        p = params[name]
        out.append(np.zeros(p.data.size) if p.grad is None else p.grad.ravel())
    return np.concatenate(out)


def _batch_loss(model, images: np.ndarray, labels: np.ndarray, global_protos,
                config: FederationConfig, align: bool):
    """Builds the per-batch training objective; returns loss plus the pieces
    for reporting. Call inside an active tape for gradients."""
    logits, taps = model.forward(tt.Tensor(images))
    ldice = dice_loss(logits, labels)
    total = ldice
    contra_val = consis_val = 0.0
    if align:
        contra, consis, anchors = batch_alignment_terms(
            model, taps, labels, global_protos, config.tau)
        if anchors > 0:
            penalty = tt.scale(tt.add(contra, consis), config.effective_lambda_c)
            total = tt.add(ldice, penalty)
            contra_val = contra.item()
            consis_val = consis.item()
    return total, ldice.item(), contra_val, consis_val, taps


def _full_batch_grad(model, images, labels, global_protos, config, align):
    """Gradient of the mean objective over a whole dataset at current params."""
    model.zero_grads()
    with tt.Tape() as tape:
        total, *_ = _batch_loss(model, images, labels, global_protos, config, align)
        tt.backward(tape, total)
    flat = _flat_grads(model)
    model.zero_grads()
    return float(total.data), flat


def local_train(client: ClientState, global_state: dict, global_protos,
                config: FederationConfig, round_index: int,
                trace: StepTrace | None = None):
    """E epochs of minibatch training from the broadcast parameters.

    Prototype losses engage from round 1 once broadcast prototypes exist;
    prototypes for upload are accumulated over the final epoch's forward
    passes. Returns (updated state, prototype upload or None, stats).
    """
    model = make_model(config)
    model.load_state(global_state)
    rng = client_rng(config, client.client_id, round_index)
    opt = make_optimizer(model.parameters(), config)
    ds = client.dataset
    n = len(ds)
    align = (config.cdpa_enabled and round_index >= 1
             and bool(getattr(global_protos, "entries", None)))

    accum = PrototypeAccumulator(tuple(model.tap_channels), class_count=2)
    sums = np.zeros(4)  # dice, contra, consis, total
    grad_sq = 0.0
    batches = 0
    for epoch in range(config.local_epochs):
        final_epoch = epoch == config.local_epochs - 1
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            images = ds.images[idx]
            labels = ds.labels[idx]
            if config.augment:
                pairs = [augment_pair(images[i], labels[i], rng)
                         for i in range(len(idx))]
                images = np.stack([p[0] for p in pairs])
                labels = np.stack([p[1] for p in pairs])
            model.zero_grads()
            try:
                with tt.Tape() as tape:
                    total, dice_val, contra_val, consis_val, taps = _batch_loss(
                        model, images, labels, global_protos, config, align)
                    total_val = float(total.data)
                    if tt.checked_enabled() and not np.isfinite(total_val):
                        raise NumericsError("non-finite loss value")
                    tt.backward(tape, total)
            except NumericsError as exc:
                raise TrainingError(
                    f"non-finite loss at round {round_index}, "
                    f"client {client.client_id}, batch {batches}") from exc
            if final_epoch and config.cdpa_enabled:
                accum.add_batch({k: v.data for k, v in taps.items()}, labels)
            if trace is not None:
                while len(trace.epoch_minibatch_grads) <= epoch:
                    trace.epoch_minibatch_grads.append([])
                minibatch_grad = _flat_grads(model)
                trace.epoch_minibatch_grads[epoch].append(minibatch_grad)
                theta = _flat_params(model)
                _, gfull = _full_batch_grad(
                    model, ds.images, ds.labels, global_protos, config, align)
                # the probe pass clobbers the minibatch gradient; put it back
                _restore_grads(model, minibatch_grad)
                trace.thetas.append(theta)
                trace.full_grads.append(gfull)
            step_grad = _flat_grads(model)
            grad_sq += float(step_grad @ step_grad)
            opt.step()
            sums += (dice_val, contra_val, consis_val, total_val)
            batches += 1
    if trace is not None:
        # closing point so smoothness pairs exist even for a single step
        theta = _flat_params(model)
        _, gfull = _full_batch_grad(
            model, ds.images, ds.labels, global_protos, config, align)
        trace.thetas.append(theta)
        trace.full_grads.append(gfull)

    protos = None
    upload_count = 0
    if config.cdpa_enabled:
        protos = accum.finalize(model.fusion, model.pathway_taps, client.client_id)
        upload_count = protos.upload_count
        if trace is not None:
            trace.proto_norms.extend(
                float(np.linalg.norm(p.vector)) for p in protos.prototypes)
    stats = ClientRoundStats(
        client_id=client.client_id,
        mean_dice_loss=float(sums[0] / batches),
        mean_contra=float(sums[1] / batches),
        mean_consis=float(sums[2] / batches),
        mean_total=float(sums[3] / batches),
        grad_norm=float(np.sqrt(grad_sq)),
        upload_count=upload_count,
    )
    return model.state(), protos, stats


def _restore_grads(model, flat: np.ndarray) -> None:
    params = {p.identifier: p for p in model.parameters()}
    offset = 0
    for name in sorted(params):
        p = params[name]
        size = p.data.size
        p.grad = flat[offset:offset + size].reshape(p.data.shape).copy()
        offset += size


# ---------------------------------------------------------------------------
# rounds and experiments

@dataclass
class RoundReport:
    round_index: int
    client_stats: list
    per_domain_dice: dict
    mean_dice: float | None  # None on rounds skipped by eval_every
    descent_ok: bool | None = None

    def to_json(self) -> dict:
        return {
            "round": self.round_index,
            "clients": [{
                "client_id": s.client_id,
                "dice_loss": s.mean_dice_loss,
                "contra": s.mean_contra,
                "consis": s.mean_consis,
                "total": s.mean_total,
                "grad_norm": s.grad_norm,
                "uploads": s.upload_count,
            } for s in self.client_stats],
            "test_dice": {str(k): v for k, v in sorted(self.per_domain_dice.items())},
            "mean_dice": self.mean_dice,
            "descent_ok": self.descent_ok,
        }


def prototype_wire_record(client_id: int, round_index: int, proto) -> dict:
    """Flat upload record for the metrics stream."""
    return {
        "client_id": client_id,
        "round": round_index,
        "pathway": proto.pathway,
        "class_id": proto.class_id,
        "support": proto.support,
        "d_fused": int(proto.vector.shape[0]),
        "vector": [float(v) for v in proto.vector],
    }


class MetricsSink:
    """JSONL stream of round reports plus a plot-ready summary CSV."""

    def __init__(self, directory: str):
        os.makedirs(directory, exist_ok=True)
        self.directory = directory
        self._jsonl = open(os.path.join(directory, "metrics.jsonl"), "w")
        self._csv = open(os.path.join(directory, "summary.csv"), "w")
        self._csv_header_done = False

    def write(self, report: RoundReport) -> None:
        self._jsonl.write(json.dumps(report.to_json()) + "\n")
        if report.mean_dice is None:  # unevaluated round; JSONL only
            return
        domains = sorted(report.per_domain_dice)
        if not self._csv_header_done:
            cols = ["round"] + [f"dice_domain_{d}" for d in domains] + ["dice_avg"]
            self._csv.write(",".join(cols) + "\n")
            self._csv_header_done = True
        row = [str(report.round_index)]
        row += [f"{report.per_domain_dice[d]:.6f}" for d in domains]
        row.append(f"{report.mean_dice:.6f}")
        self._csv.write(",".join(row) + "\n")

    def close(self) -> None:
        self._jsonl.close()
        self._csv.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_round(round_index: int, clients: list, global_state: dict,
              global_protos, config: FederationConfig,
              trace: StepTrace | None = None):
    """One communication round; returns (new state, new prototypes, stats).

    Client work is independent given the broadcast state, so the parallel
    path only changes scheduling; uploads and aggregation stay in ascending
    client order either way.
    """
    def work(client: ClientState):
        t = trace if (trace is not None and client.client_id == 0) else None
        return local_train(client, global_state, global_protos, config,
                           round_index, trace=t)

    if config.parallel and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=len(clients)) as pool:
            results = list(pool.map(work, clients))
    else:
        results = [work(c) for c in clients]

    client_params = [state for state, _, _ in results]
    uploads = [protos for _, protos, _ in results if protos is not None]
    stats = [s for _, _, s in results]
    counts = [c.sample_count for c in clients]
    new_state, new_protos = run_server_round(
        uploads, client_params, counts, class_count=2,
        metric=config.finch_metric, levels=config.finch_levels)
    return new_state, new_protos, stats


def hard_dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """Foreground overlap of binary masks; both empty scores 1.0."""
    p = pred == 1
    g = truth == 1
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def evaluate(model: SegNet, test_sets: dict) -> dict:
    """Mean per-domain foreground Dice under hard argmax."""
    out = {}
    for domain in sorted(test_sets):
        ds = test_sets[domain]
        logits, _ = model.forward(tt.Tensor(ds.images))
        pred = np.argmax(logits.data, axis=1)
        out[domain] = float(np.mean([hard_dice(pred[i], ds.labels[i])
                                     for i in range(len(ds))]))
    return out


def evaluate_state(global_state: dict, test_sets: dict,
                   config: FederationConfig) -> dict:
    model = make_model(config)
    model.load_state(global_state)
    return evaluate(model, test_sets)


@dataclass
class DescentRecord:
    round_index: int
    objective_before: float
    objective_after: float
    grad_sq_sum: float


@dataclass
class ExperimentResult:
    config: FederationConfig
    reports: list
    final_state: dict
    final_protos: object
    round_digests: list
    trace: StepTrace | None = None
    trace_aligned: StepTrace | None = None
    descent_records: list | None = None

    @property
    def mean_final_dice(self) -> float:
        return self.reports[-1].mean_dice


class TheoryMonitor:
    """Measures the global objective and its full-batch gradient at the
    broadcast parameters. F is the training objective itself (dice plus the
    weighted prototype terms using the currently broadcast prototypes), and
    both sides of a round's comparison use the same prototype set. A
    per-step learning-rate schedule is not implemented; the single
    configured rate is used throughout."""

    def __init__(self, clients: list, config: FederationConfig):
        self.clients = clients
        self.config = config
        total = sum(c.sample_count for c in clients)
        self.weights = [c.sample_count / total for c in clients]

    def objective(self, global_state: dict, global_protos, round_index: int,
                  with_grad: bool = False):
        config = self.config
        align = (config.cdpa_enabled and round_index >= 1
                 and bool(getattr(global_protos, "entries", None)))
        value = 0.0
        grad = None
        for client, w in zip(self.clients, self.weights):
            model = make_model(config)
            model.load_state(global_state)
            if with_grad:
                loss, flat = _full_batch_grad(
                    model, client.dataset.images, client.dataset.labels,
                    global_protos, config, align)
                grad = w * flat if grad is None else grad + w * flat
            else:
                total, *_ = _batch_loss(
                    model, client.dataset.images, client.dataset.labels,
                    global_protos, config, align)
                loss = float(total.data)
            value += w * loss
        if with_grad:
            return value, float(grad @ grad)
        return value


def run_experiment(config: FederationConfig, sink: MetricsSink | None = None,
                   collect_trace: bool = False, monitor: bool = False,
                   data=None) -> ExperimentResult:
    """T communication rounds from a fresh seeded model.

    collect_trace records client 0's steps in round 0 for theory estimation,
    plus a second trace in round 1 when prototype alignment is active there
    (the objective gains the prototype terms, so smoothness differs); monitor
    evaluates the one-round descent quantities every round (slow: adds
    full-batch passes over every client).
    """
    config.validate()
    prev_checked, prev_dtype = tt.checked_enabled(), tt.default_dtype()
    tt.set_checked(config.checked)
    tt.set_default_dtype(config.dtype())
    try:
        if data is None:
            styles = default_styles(config.client_count)
            data = make_federation_data(styles, config.train_per_client,
                                        config.test_per_client, config.seed,
                                        config.image_size)
        train_sets, test_sets = data
        clients = [ClientState(i, train_sets[i], len(train_sets[i]))
                   for i in range(config.client_count)]
        global_state = make_model(config).state()
        global_protos = GlobalPrototypeSet()
        theory_monitor = TheoryMonitor(clients, config) if monitor else None
        trace = StepTrace() if collect_trace else None
        trace_aligned = (StepTrace() if collect_trace and config.cdpa_enabled
                         and config.rounds >= 2 else None)

        reports, digests, descent_records = [], [], []
        for t in range(config.rounds):
            objective_before = grad_sq = None
            if theory_monitor is not None:
                objective_before, grad_sq = theory_monitor.objective(
                    global_state, global_protos, t, with_grad=True)
            round_trace = trace if t == 0 else trace_aligned if t == 1 else None
            new_state, new_protos, stats = run_round(
                t, clients, global_state, global_protos, config,
                trace=round_trace)
            if theory_monitor is not None:
                objective_after = theory_monitor.objective(
                    new_state, global_protos, t)
                steps = config.steps_per_round(clients[0].sample_count)
                descent_records.append(DescentRecord(
                    t, objective_before, objective_after, steps * grad_sq))
            global_state, global_protos = new_state, new_protos
            digests.append(hashlib.sha256(state_bytes(global_state)).hexdigest())
            if (t + 1) % config.eval_every == 0 or t == config.rounds - 1:
                per_domain = evaluate_state(global_state, test_sets, config)
                mean_dice = float(np.mean(list(per_domain.values())))
            else:
                per_domain, mean_dice = {}, None
            report = RoundReport(t, stats, per_domain, mean_dice)
            reports.append(report)
            if sink is not None:
                sink.write(report)
        return ExperimentResult(config, reports, global_state, global_protos,
                                digests, trace=trace,
                                trace_aligned=trace_aligned,
                                descent_records=descent_records or None)
    finally:
        tt.set_checked(prev_checked)
        tt.set_default_dtype(prev_dtype)


# ---------------------------------------------------------------------------
# reference FedAvg (independent orchestration for the reduction check)

def run_reference_fedavg(config: FederationConfig, data=None):
    """Plain FedAvg written straight from its definition: broadcast, E local
    epochs of dice-only SGD/Adam, sample-count-weighted parameter average.
    Shares the network and optimizer numerics but none of the round
    orchestration above. Returns (per-round state digests, final state)."""
    config.validate()
    prev_checked, prev_dtype = tt.checked_enabled(), tt.default_dtype()
    tt.set_checked(config.checked)
    tt.set_default_dtype(config.dtype())
    try:
        if data is None:
            styles = default_styles(config.client_count)
            data = make_federation_data(styles, config.train_per_client,
                                        config.test_per_client, config.seed,
                                        config.image_size)
        train_sets, _ = data

        def fresh_model():
            model = SegNet(SegNetConfig(input_channels=1, class_count=2),
                           seed=config.seed)
            model.set_fsr_frozen(True)
            return model

        global_state = fresh_model().state()
        digests = []
        counts = [len(ds) for ds in train_sets]
        total = sum(counts)
        for t in range(config.rounds):
            states = []
            for cid, ds in enumerate(train_sets):
                model = fresh_model()
                model.load_state(global_state)
                rng = np.random.default_rng(
                    np.random.SeedSequence((config.seed, cid, t)))
                opt = make_optimizer(model.parameters(), config)
                n = len(ds)
                for _ in range(config.local_epochs):
                    order = rng.permutation(n)
                    for start in range(0, n, config.batch_size):
                        idx = order[start:start + config.batch_size]
                        model.zero_grads()
                        with tt.Tape() as tape:
                            logits, _ = model.forward(tt.Tensor(ds.images[idx]))
                            loss = dice_loss(logits, ds.labels[idx])
                            tt.backward(tape, loss)
                        opt.step()
                states.append(model.state())
            merged = {}
            for name in states[0]:
                acc = (counts[0] / total) * states[0][name]
                for cid in range(1, len(states)):
                    acc = acc + (counts[cid] / total) * states[cid][name]
                merged[name] = acc
            global_state = merged
            digests.append(hashlib.sha256(state_bytes(global_state)).hexdigest())
        return digests, global_state
    finally:
        tt.set_checked(prev_checked)
        tt.set_default_dtype(prev_dtype)


# ---------------------------------------------------------------------------
# theory estimation and calculators

@dataclass
class TheoryParams:
    L_sm: float
    sigma_sq: float
    G: float
    tau: float
    lambda_c: float
    local_steps: int
    eta: float
    delta: float | None = None
    epsilon: float | None = None


def estimate_theory_params(trace: StepTrace, config: FederationConfig,
                           sample_count: int) -> TheoryParams:
    """Finite-trace estimates of the smoothness, gradient-variance and
    prototype-norm constants. Estimates, not certificates."""
    if len(trace.thetas) < 2:
        raise EstimationError("need at least 2 recorded steps")
    L = 0.0
    found = False
    for i in range(len(trace.thetas)):
        for j in range(i + 1, len(trace.thetas)):
            dtheta = float(np.linalg.norm(trace.thetas[i] - trace.thetas[j]))
            if dtheta == 0.0:
                continue
            dgrad = float(np.linalg.norm(trace.full_grads[i] - trace.full_grads[j]))
            L = max(L, dgrad / dtheta)
            found = True
    if not found:
        raise EstimationError("trace never moved; cannot estimate smoothness")
    sigma_sq = 0.0
    for grads in trace.epoch_minibatch_grads:
        if not grads:
            continue
        stack = np.stack(grads)
        mean = stack.mean(axis=0)
        sigma_sq = max(sigma_sq, float(np.mean(np.sum((stack - mean) ** 2, axis=1))))
    G = max(trace.proto_norms) if trace.proto_norms else 0.0
    return TheoryParams(
        L_sm=L, sigma_sq=sigma_sq, G=G, tau=config.tau,
        lambda_c=config.effective_lambda_c,
        local_steps=config.steps_per_round(sample_count),
        eta=config.learning_rate)


def alpha_coefficient(eta: float, L_sm: float) -> float:
    return eta - L_sm * eta * eta / 2.0


def lr_upper_bound(theory: TheoryParams, grad_sq_sum: float):
    """Largest admissible learning rate for one-round descent, given the
    summed squared gradient norms of the round. Returns (bound, diagnostic);
    the diagnostic is set when the prototype penalty already exceeds the
    gradient signal, which forces the bound to zero."""
    numerator = 2.0 * (grad_sq_sum
                       - theory.lambda_c * theory.local_steps * theory.G / theory.tau)
    if numerator < 0.0:
        lam_max = theory.tau * grad_sq_sum / (theory.local_steps * theory.G)
        return 0.0, (f"lambda_c too large: lambda_c={theory.lambda_c:g} exceeds "
                     f"tau*grad_sq_sum/(E*G)={lam_max:g}")
    denominator = theory.L_sm * (grad_sq_sum + theory.local_steps * theory.sigma_sq)
    if denominator <= 0.0:
        raise TheoryRegimeError("L_sm*(grad_sq_sum + E*sigma_sq) must be positive")
    return numerator / denominator, None


def lambda_c_bound_descent(theory: TheoryParams, grad_sq_sum: float) -> float:
    """lambda_c ceiling that keeps the lr bound's numerator positive."""
    if theory.G == 0.0:
        return float("inf")
    return theory.tau * grad_sq_sum / (theory.local_steps * theory.G)


def lambda_c_bound_convergence(theory: TheoryParams) -> float:
    """lambda_c ceiling for the finite-round convergence guarantee."""
    if theory.epsilon is None:
        raise TheoryRegimeError("epsilon required for the convergence bound")
    if theory.G == 0.0:
        return float("inf")
    return theory.tau * theory.epsilon / theory.G


def rounds_to_epsilon(theory: TheoryParams) -> int:
    """Communication rounds sufficient to drive the mean squared gradient
    below epsilon, under the estimated constants."""
    if theory.delta is None or theory.epsilon is None:
        raise TheoryRegimeError("delta and epsilon are required")
    lam_term = theory.lambda_c * theory.G / theory.tau
    if theory.G > 0.0 and theory.lambda_c >= theory.tau * theory.epsilon / theory.G:
        raise TheoryRegimeError(
            f"lambda_c < tau*epsilon/G violated: {theory.lambda_c:g} >= "
            f"{theory.tau * theory.epsilon / theory.G:g}")
    eta_limit = (2.0 * (theory.epsilon - lam_term)
                 / (theory.L_sm * (theory.epsilon + theory.sigma_sq)))
    if theory.eta >= eta_limit:
        raise TheoryRegimeError(
            f"eta < 2(epsilon - lambda_c*G/tau)/(L_sm(epsilon + sigma_sq)) "
            f"violated: {theory.eta:g} >= {eta_limit:g}")
    E, eta, L = theory.local_steps, theory.eta, theory.L_sm
    denominator = (E * theory.epsilon * (2.0 * eta - L * eta * eta)
                   - E * eta * (L * eta * theory.sigma_sq + 2.0 * lam_term))
    return int(math.ceil(2.0 * theory.delta / denominator))


def descent_rhs(record: DescentRecord, theory: TheoryParams) -> float:
    a = alpha_coefficient(theory.eta, theory.L_sm)
    return (record.objective_before
            - a * record.grad_sq_sum
            + theory.L_sm * theory.eta ** 2 * theory.local_steps * theory.sigma_sq / 2.0
            + theory.lambda_c * theory.local_steps * theory.eta * theory.G / theory.tau)


def descent_check(records: list, theory: TheoryParams) -> float:
    """Fraction of rounds whose measured objective drop stays within the
    one-round bound. Stochastic, so a fraction, not a guarantee."""
    if not records:
        raise EstimationError("no descent records")
    ok = sum(1 for r in records
             if r.objective_after <= descent_rhs(r, theory) + 1e-12)
    return ok / len(records)
