"""End-to-end federated runs: the three-stage noisy-label pipeline and its baselines.

``method="fedsir"``
    Stage I: every client trains from a shared random init with CE, extracts
    dominant class directions, and reports ``(mu, energy)``. The server fits a
    2-component GMM, partitions clients, and averages the clean ones into the
    starting global model. Each later round: clean clients train with the
    logit-adjusted loss; every ``relabel_period`` rounds they also send spectral
    signatures, from which the server builds class references that noisy
    clients use (through the clean reference model's features) to relabel
    their data. Noisy clients then train with the LA-KD loss against the
    broadcast global model. The server aggregates all clients with DaAgg and
    the clean clients alone (FedAvg) into the clean reference model.
``method="fedavg"``
    All clients, CE, sample-weighted averaging from the shared random init.
``method="pruning"``
    Stage I, then FedAvg over the identified clean clients only.

Every random draw comes from a stream keyed by ``(seed, purpose, round, client)``,
so runs are reproducible and a client's training never depends on the order in
which other clients are processed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from fedsir import aggregate, datagen, identify, relabel, spectral
from fedsir.datagen import ClientDataset, DataGenConfig, SampleSet
from fedsir.identify import ClientPartition, GmmModel
from fedsir.losses import KDConfig, LAConfig, class_priors, logit_adjustment
from fedsir.model import MLP, LocalTrainConfig, LossAux, LossKind, local_train
from fedsir.relabel import RelabelReport, Strategy
from fedsir.seeding import derive_rng
from fedsir.spectral import ClassSimilarityMatrix, ClientSpectralStats, SpectralSignature

log = logging.getLogger(__name__)

METHODS = ("fedsir", "fedavg", "pruning")


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    feature_dim: int = 16

    def __post_init__(self) -> None:
        if self.hidden_dim < 1 or self.feature_dim < 1:
            raise ValueError("layer widths must be >= 1")


@dataclass(frozen=True)
class Ablation:
    relabel: bool = True
    la: bool = True
    kd: bool = True
    daagg: bool = True


def _stage1_default() -> LocalTrainConfig:
    return LocalTrainConfig(epochs=5, learning_rate=5e-5, weight_decay=2e-2)


def _stage2_default() -> LocalTrainConfig:
    return LocalTrainConfig(epochs=1, learning_rate=3e-4, weight_decay=5e-4)


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "fedsir"
    seed: int = 0
    rounds: int = 100
    relabel_period: int = 20
    residual_rank: int = 12
    relabel_strategy: str = "agreement"
    normalize_features: bool = False
    excluded_as_clean: bool = False
    reference_weighting: str = "linear"
    distance_rescale: bool = False
    test_fraction: float = 0.1
    feature_file: str = ""
    data: DataGenConfig = field(default_factory=DataGenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: LocalTrainConfig = field(default_factory=_stage1_default)
    stage2: LocalTrainConfig = field(default_factory=_stage2_default)
    la: LAConfig = field(default_factory=LAConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.relabel_period < 1:
            raise ValueError("relabel_period must be >= 1")
        if self.residual_rank < 1:
            raise ValueError("residual_rank must be >= 1")
        Strategy(self.relabel_strategy)
        if self.reference_weighting not in ("linear", "sqrt"):
            raise ValueError("reference_weighting must be 'linear' or 'sqrt'")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")

    @property
    def effective_la(self) -> LAConfig:
        return self.la if self.ablation.la else replace(self.la, beta=0.0)

    @property
    def effective_kd(self) -> KDConfig:
        return self.kd if self.ablation.kd else replace(self.kd, kd_weight=0.0)


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    clean_accuracy: float
    noise_rates: list[float]
    weights: list[float] | None = None
    relabel: list[RelabelReport] = field(default_factory=list)
    # reports of the strategies that were scored but not applied (diagnostics)
    relabel_variants: dict[str, list[RelabelReport]] = field(default_factory=dict)


@dataclass
class Stage1Result:
    partition: ClientPartition
    global_params: np.ndarray
    stats: list[ClientSpectralStats]
    client_params: list[np.ndarray]
    signatures: list[SpectralSignature]
    similarities: list[ClassSimilarityMatrix | None]
    gmm: GmmModel | None


@dataclass
class RunState:
    round: int
    global_params: np.ndarray
    clean_params: np.ndarray
    clients: list[ClientDataset]
    partition: ClientPartition


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rounds: list[RoundMetrics]
    summary: dict
    stage1: Stage1Result | None = None
    initial_clients: list[ClientDataset] = field(default_factory=list)
    final_state: RunState | None = None


@dataclass
class Context:
    cfg: ExperimentConfig
    mlp: MLP
    test: SampleSet


def _seed(seed: int, *parts) -> int:
    return int(derive_rng(seed, *parts).integers(2**32))


def build_data(cfg: ExperimentConfig) -> tuple[list[ClientDataset], SampleSet, DataGenConfig]:
    """Client datasets and the clean held-out test split for ``cfg``."""
    data_cfg = replace(cfg.data, rng_seed=cfg.seed)
    if cfg.feature_file:
        samples, num_classes = datagen.load_features(cfg.feature_file)
        data_cfg = replace(data_cfg, num_classes=num_classes, input_dim=samples.input_dim)
        train, test = datagen.split_holdout(samples, cfg.test_fraction, cfg.seed)
        clients = datagen.inject_symmetric_noise(datagen.partition_dirichlet(train, data_cfg), data_cfg)
        return clients, test, data_cfg
    clients, test = datagen.make_federated_data(data_cfg, cfg.test_fraction)
    return clients, test, data_cfg


def build_model(cfg: ExperimentConfig, data_cfg: DataGenConfig) -> MLP:
    return MLP(data_cfg.input_dim, cfg.model.hidden_dim, cfg.model.feature_dim, data_cfg.num_classes)


def _train(ctx: Context, params, ds: ClientDataset, base: LocalTrainConfig, seed_parts, kind, aux=None):
    tcfg = replace(base, rng_seed=_seed(ctx.cfg.seed, *seed_parts))
    return local_train(ctx.mlp, params, ds.inputs, ds.observed, tcfg, kind, aux)


def _margin(ctx: Context, ds: ClientDataset) -> np.ndarray:
    return logit_adjustment(class_priors(ds.observed, ctx.mlp.num_classes), ctx.cfg.effective_la)


def run_stage1(ctx: Context, clients: list[ClientDataset], init_params: np.ndarray) -> Stage1Result:
    """Local CE training, spectral descriptors, GMM partition, clean-only FedAvg."""
    cfg = ctx.cfg
    params, sigs, sims, stats = [], [], [], []
    for ds in clients:
        p = _train(ctx, init_params, ds, cfg.stage1, ("stage1", ds.client_id), LossKind.CE)
        sig = spectral.extract_spectral(ds, ctx.mlp, p, 0, cfg.normalize_features)
        sim = spectral.class_similarity(sig, ctx.mlp.num_classes)
        params.append(p)
        sigs.append(sig)
        sims.append(sim)
        stats.append(spectral.offdiag_stats(sim, ds.client_id))
    partition, gmm = identify.identify_clients(stats, _seed(cfg.seed, "gmm"), cfg.excluded_as_clean)
    clean = sorted(partition.clean)
    global_params = aggregate.fedavg([params[k] for k in clean], [len(clients[k]) for k in clean])
    return Stage1Result(partition, global_params, stats, params, sigs, sims, gmm)


def _relabel_noisy(ctx: Context, state: RunState, signatures, trained_ids, report_variants: bool):
    cfg = ctx.cfg
    counts = {k: state.clients[k].class_counts(ctx.mlp.num_classes) for k in trained_ids}
    ref = relabel.aggregate_references(signatures, counts, cfg.residual_rank, cfg.reference_weighting)
    applied, variants = [], {s.value: [] for s in Strategy if s.value != cfg.relabel_strategy}
    for k in sorted(state.partition.noisy_treatment):
        ds = state.clients[k]
        if not ref.coverage:
            log.warning("empty class reference at round %d; no relabeling", state.round)
            break
        z = ctx.mlp.features(state.clean_params, ds.inputs)
        if cfg.normalize_features:
            z = spectral.row_normalize(z)
        y_r, y_n = relabel.proposed_labels(z, ref)
        for strategy in Strategy:
            new = relabel.apply_strategy(ds.observed, y_r, y_n, strategy)
            rep = relabel.make_report(ds, new, strategy)
            if strategy.value == cfg.relabel_strategy:
                applied.append(rep)
                state.clients[k] = ds.with_labels(new)
            elif report_variants:
                variants[strategy.value].append(rep)
    return applied, variants if report_variants else {}


def run_round(ctx: Context, state: RunState, report_variants: bool = False) -> RoundMetrics:
    """One communication round of the noise-aware loop; mutates ``state``."""
    cfg, t = ctx.cfg, state.round
    part = state.partition
    clean_ids = sorted(part.clean)
    noisy_ids = sorted(part.noisy_treatment)
    relabel_now = cfg.ablation.relabel and t % cfg.relabel_period == 0

    local: dict[int, np.ndarray] = {}
    signatures = []
    for k in clean_ids:
        ds = state.clients[k]
        aux = LossAux(margin=_margin(ctx, ds))
        local[k] = _train(ctx, state.global_params, ds, cfg.stage2, ("round", t, k), LossKind.LA, aux)
        if relabel_now:
            signatures.append(
                spectral.extract_spectral(ds, ctx.mlp, local[k], cfg.residual_rank, cfg.normalize_features)
            )

    reports, variants = [], {}
    if relabel_now and signatures and noisy_ids:
        reports, variants = _relabel_noisy(ctx, state, signatures, clean_ids, report_variants)

    for k in noisy_ids:
        ds = state.clients[k]
        aux = LossAux(margin=_margin(ctx, ds), teacher_params=state.global_params, kd=cfg.effective_kd)
        local[k] = _train(ctx, state.global_params, ds, cfg.stage2, ("round", t, k), LossKind.LA_KD, aux)

    ids = sorted(local)
    params = [local[k] for k in ids]
    counts = [len(state.clients[k]) for k in ids]
    if cfg.ablation.daagg:
        clean_pos = [i for i, k in enumerate(ids) if k in part.clean]
        new_global, agg = aggregate.daagg(params, counts, clean_pos, cfg.distance_rescale)
        weights = agg.weights.tolist()
    else:
        new_global = aggregate.fedavg(params, counts)
        weights = aggregate.sample_weights(counts).tolist()
    state.clean_params = aggregate.fedavg([local[k] for k in clean_ids], [len(state.clients[k]) for k in clean_ids])
    state.global_params = new_global

    metrics = RoundMetrics(
        round=t,
        accuracy=ctx.mlp.accuracy(state.global_params, ctx.test.inputs, ctx.test.true),
        clean_accuracy=ctx.mlp.accuracy(state.clean_params, ctx.test.inputs, ctx.test.true),
        noise_rates=[ds.noise_rate for ds in state.clients],
        weights=weights,
        relabel=reports,
        relabel_variants=variants,
    )
    state.round += 1
    return metrics


def _fedavg_rounds(ctx: Context, clients, participants, params, first_round=1):
    rounds = []
    for t in range(first_round, first_round + ctx.cfg.rounds):
        local = [_train(ctx, params, clients[k], ctx.cfg.stage2, ("round", t, k), LossKind.CE) for k in participants]
        counts = [len(clients[k]) for k in participants]
        params = aggregate.fedavg(local, counts)
        full = np.zeros(len(clients))
        full[participants] = aggregate.sample_weights(counts)
        rounds.append(
            RoundMetrics(
                round=t,
                accuracy=ctx.mlp.accuracy(params, ctx.test.inputs, ctx.test.true),
                clean_accuracy=float("nan"),
                noise_rates=[ds.noise_rate for ds in clients],
                weights=full.tolist(),
            )
        )
    return rounds, params


def identification_accuracy(partition: ClientPartition, clients: list[ClientDataset]) -> float:
    hits = [(ds.client_id in partition.clean) == (not ds.is_noisy_ground_truth) for ds in clients]
    return float(np.mean(hits))


def summarize(result_rounds: list[RoundMetrics], stage1: Stage1Result | None, initial: list[ClientDataset], final: list[ClientDataset]) -> dict:
    accs = [m.accuracy for m in result_rounds]
    reports = [r for m in result_rounds for r in m.relabel]
    changed = sum(r.changed for r in reports)
    summary = {
        "final_accuracy": accs[-1],
        "best_accuracy": max(accs),
        "identification_accuracy": float("nan"),
        "relabel_precision": sum(r.changed_correctly for r in reports) / changed if changed else float("nan"),
        "mean_noise_reduction": float("nan"),
        "relabel_rounds": len({m.round for m in result_rounds if m.relabel}),
    }
    if stage1 is not None:
        summary["identification_accuracy"] = identification_accuracy(stage1.partition, initial)
        treated = sorted(stage1.partition.noisy_treatment)
        if treated:
            summary["mean_noise_reduction"] = float(
                np.mean([initial[k].noise_rate - final[k].noise_rate for k in treated])
            )
        summary["clean_clients"] = sorted(stage1.partition.clean)
    return summary


def run_experiment(
    cfg: ExperimentConfig,
    report_variants: bool = False,
    on_round: Callable[[RoundMetrics], None] | None = None,
) -> ExperimentResult:
    """Run ``cfg.method`` for ``cfg.rounds`` rounds and evaluate on the clean test split."""
    clients, test, data_cfg = build_data(cfg)
    mlp = build_model(cfg, data_cfg)
    ctx = Context(cfg, mlp, test)
    init = mlp.init_params(_seed(cfg.seed, "init"))
    initial = list(clients)

    if cfg.method == "fedavg":
        rounds, params = _fedavg_rounds(ctx, clients, list(range(len(clients))), init)
        if on_round:
            for m in rounds:
                on_round(m)
        state = RunState(cfg.rounds + 1, params, params, clients, ClientPartition(frozenset(range(len(clients))), frozenset()))
        return ExperimentResult(cfg, rounds, summarize(rounds, None, initial, clients), None, initial, state)

    stage1 = run_stage1(ctx, clients, init)
    if cfg.method == "pruning":
        rounds, params = _fedavg_rounds(ctx, clients, sorted(stage1.partition.clean), stage1.global_params)
        if on_round:
            for m in rounds:
                on_round(m)
        state = RunState(cfg.rounds + 1, params, params, clients, stage1.partition)
        return ExperimentResult(cfg, rounds, summarize(rounds, stage1, initial, clients), stage1, initial, state)

    state = RunState(1, stage1.global_params.copy(), stage1.global_params.copy(), list(clients), stage1.partition)
    rounds = []
    for _ in range(cfg.rounds):
        m = run_round(ctx, state, report_variants)
        rounds.append(m)
        if on_round:
            on_round(m)
    return ExperimentResult(cfg, rounds, summarize(rounds, stage1, initial, state.clients), stage1, initial, state)


def run_identification(cfg: ExperimentConfig) -> tuple[Stage1Result, list[ClientDataset]]:
    """Stage I alone, with the same data and seeds ``run_experiment`` would use."""
    clients, test, data_cfg = build_data(cfg)
    mlp = build_model(cfg, data_cfg)
    stage1 = run_stage1(Context(cfg, mlp, test), clients, mlp.init_params(_seed(cfg.seed, "init")))
    return stage1, clients


def train_centralized(cfg: ExperimentConfig) -> float:
    """Test accuracy of the same model trained on the pooled, true-labeled training data.

    Uses the Stage II optimizer for ``rounds * stage2.epochs`` epochs; this is the
    clean-data ceiling that FedAvg at zero noise is compared against.
    """
    clients, test, data_cfg = build_data(cfg)
    mlp = build_model(cfg, data_cfg)
    x = np.concatenate([ds.inputs for ds in clients])
    y = np.concatenate([ds.true for ds in clients])
    tcfg = replace(cfg.stage2, epochs=cfg.rounds * cfg.stage2.epochs, rng_seed=_seed(cfg.seed, "central"))
    params = local_train(mlp, mlp.init_params(_seed(cfg.seed, "init")), x, y, tcfg, LossKind.CE)
    return mlp.accuracy(params, test.inputs, test.true)

