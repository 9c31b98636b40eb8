"""The knowledge-transfer loop: configuration, round state machine, ledger, reports."""
import copy
import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import client as cl
from . import server as sv
from .data import make_synthetic_dataset, partition_dirichlet, partition_pathological, read_dataset_file
from .etf import CONTRASTIVE, ArcFaceParams, synthesize_etf
from .generator import BridgeSynthesizer, ImageVectorPair, build_synthetic_generator
from .rng import keyed_rng

SCHEMA = "ktl-config/1"

ABLATIONS = ("none", "-L_i^M", "-L^MSE", "-L^MMD", "-ETF", "-Q", "+CS", "*L_i^A")
_ALIASES = {
    "": "none", "full": "none",
    "-LiM": "-L_i^M", "-LM": "-L_i^M", "no-transfer": "-L_i^M",
    "-MSE": "-L^MSE", "-LMSE": "-L^MSE",
    "-MMD": "-L^MMD", "-LMMD": "-L^MMD",
    "-Qbar": "-Q", "-Q̄": "-Q",
    "CS": "+CS", "contrastive": "*L_i^A", "*LiA": "*L_i^A",
}

CSV_COLUMNS = ("round", "client_id", "acc", "loss_A", "loss_M", "up_elems", "down_elems")


class ConfigError(ValueError):
    pass


def canonical_ablation(name):
    name = _ALIASES.get(name, name)
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    return name


@dataclass
class NoiseConfig:
    """Gaussian perturbation of uploads (prototypes) and downloads (pairs)."""

    prototypes: bool = False
    pairs: bool = False
    vector_scale: float = 0.05
    vector_prob: float = 0.2
    image_scale: float = 0.2
    image_prob: float = 0.2


@dataclass
class ExperimentConfig:
    schema: str = SCHEMA
    dataset: dict = field(default_factory=lambda: {
        "kind": "synthetic", "C": 10, "d": 32, "samples_per_class": 200, "spread": 0.5})
    N: int = 20
    rho: float = 1.0
    partition: dict = field(default_factory=lambda: {"kind": "dirichlet", "beta": 0.1})
    min_client_samples: int = 10
    palette: list = field(default_factory=lambda: [list(p) for p in cl.DEFAULT_PALETTE])
    K: int | None = None
    feature_dim: int = 64
    H: int = 32
    Z: int = 64
    d_img: int | None = None
    mu: float = 50.0
    lam: float = 1.0
    s: float = 64.0
    m: float = 0.5
    lr_client: float = 0.01
    lr_server: float = 0.01
    server_batch: int = 100
    server_epochs: int = 100
    batch: int = 10
    rounds: int = 1000
    local_epochs: int = 1
    ablation: str = "none"
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seeds: list = field(default_factory=lambda: [0])
    mode: str = "federated"
    server_warm_start: bool = True
    workers: int = 1
    bridge: str | None = None
    probe_alignment: bool = True

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        schema = raw.pop("schema", SCHEMA)
        if schema != SCHEMA:
            raise ConfigError(f"unsupported config schema {schema!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "noise" in raw:
            noise = raw["noise"]
            if not isinstance(noise, dict):
                raise ConfigError("noise must be an object")
            try:
                raw["noise"] = NoiseConfig(**noise)
            except TypeError as exc:
                raise ConfigError(f"bad noise block: {exc}") from None
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        new = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        new.validate()
        return new

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        self.ablation = canonical_ablation(self.ablation)
        need(self.mode in ("federated", "single-client"), f"unknown mode {self.mode!r}")
        need(isinstance(self.dataset, dict) and self.dataset.get("kind") in ("synthetic", "file"),
             "dataset.kind must be 'synthetic' or 'file'")
        if self.dataset["kind"] == "file":
            need(isinstance(self.dataset.get("path"), str), "dataset.path required for kind 'file'")
        else:
            for key in ("C", "d", "samples_per_class"):
                need(int(self.dataset.get(key, 0)) >= 1, f"dataset.{key} must be >= 1")
            need(float(self.dataset.get("spread", 0.5)) >= 0, "dataset.spread must be >= 0")
        need(self.N >= 1, "N must be >= 1")
        need(0 < self.rho <= 1, "rho must lie in (0, 1]")
        need(self.rounds >= 1, "rounds must be >= 1")
        need(self.local_epochs >= 1, "local_epochs must be >= 1")
        need(self.batch >= 1 and self.server_batch >= 1, "batch sizes must be >= 1")
        need(self.server_epochs >= 0, "server_epochs must be >= 0")
        need(self.lr_client > 0 and self.lr_server > 0, "learning rates must be positive")
        need(self.mu >= 0 and self.lam >= 0, "mu and lam must be non-negative")
        need(self.s > 0 and 0 <= self.m < math.pi / 2, "need s > 0 and 0 <= m < pi/2")
        need(self.feature_dim >= 1 and self.H >= 1 and self.Z >= 1, "dimensions must be positive")
        need(self.K is None or self.K >= 1, "K must be positive")
        need(self.d_img is None or self.d_img >= 1, "d_img must be positive")
        need(len(self.palette) >= 1, "palette must not be empty")
        for entry in self.palette:
            need(len(entry) == 2 and entry[0] >= 1 and entry[1] >= self.feature_dim,
                 f"palette entry {entry} must be (depth >= 1, width >= feature_dim)")
        need(isinstance(self.seeds, list) and self.seeds and all(int(s) >= 0 for s in self.seeds),
             "seeds must be a non-empty list of non-negative integers")
        need(self.workers >= 1, "workers must be >= 1")
        kind = self.partition.get("kind") if isinstance(self.partition, dict) else None
        need(kind in ("dirichlet", "pathological"), "partition.kind must be 'dirichlet' or 'pathological'")
        if kind == "dirichlet":
            need(float(self.partition.get("beta", 0.1)) > 0, "partition.beta must be positive")
        else:
            need(int(self.partition.get("classes_per_client", 0)) >= 1,
                 "partition.classes_per_client must be >= 1")
        if self.mode == "single-client":
            need(self.N == 1 and self.rho == 1 and self.local_epochs == 1,
                 "single-client mode needs N=1, rho=1, local_epochs=1")
        n = self.noise
        need(n.vector_scale >= 0 and n.image_scale >= 0, "noise scales must be >= 0")
        need(0 <= n.vector_prob <= 1 and 0 <= n.image_prob <= 1, "noise probabilities must lie in [0, 1]")
        if self.dataset["kind"] == "synthetic":
            C = int(self.dataset["C"])
            need(self.K is None or self.K >= C - 1, "K must be >= C-1")
            need(self.d_img is None or self.d_img == int(self.dataset["d"]),
                 "d_img must equal the client input dimension")
        return self


def single_client_config(**overrides):
    base = dict(mode="single-client", N=1, rho=1.0, local_epochs=1,
                partition={"kind": "dirichlet", "beta": 1.0}, min_client_samples=1)
    base.update(overrides)
    return ExperimentConfig(**base).validate()


class CommLedger:
    """Exact element counts moved per round and client."""

    def __init__(self):
        self.entries = {}

    def record(self, round_idx, client_id, up=0, down=0):
        key = (round_idx, client_id)
        u, d = self.entries.get(key, (0, 0))
        self.entries[key] = (u + int(up), d + int(down))

    def get(self, round_idx, client_id):
        return self.entries.get((round_idx, client_id), (0, 0))

    def round_totals(self, round_idx):
        up = sum(u for (r, _), (u, _d) in self.entries.items() if r == round_idx)
        down = sum(d for (r, _), (_u, d) in self.entries.items() if r == round_idx)
        return up, down


def ledger_totals(ledger):
    up = sum(u for u, _ in ledger.entries.values())
    down = sum(d for _, d in ledger.entries.values())
    return {"upload_elements": up, "download_elements": down}


@dataclass
class RoundReport:
    round: int
    participants: list
    accuracy: list
    mean_acc: float
    weighted_acc: float
    loss_A: dict
    loss_M: dict
    mean_loss_A: float
    mean_loss_M: float
    server_trace: list
    align_mmd: float | None
    align_mmd_before: float | None
    upload: dict
    download: dict


@dataclass
class ClientSlot:
    model: cl.ClientModel
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_total: int


@dataclass
class RunState:
    config: ExperimentConfig
    seed: int
    etf: object
    gen: object
    clients: list
    transformer: object
    pairs: list = field(default_factory=list)
    centroids: dict = field(default_factory=dict)
    ledger: CommLedger = field(default_factory=CommLedger)
    synthesize: object = None
    K: int = 0
    C: int = 0


def load_dataset(cfg, seed):
    opts = cfg.dataset
    if opts["kind"] == "file":
        return read_dataset_file(opts["path"])
    return make_synthetic_dataset(int(opts["C"]), int(opts["d"]), int(opts["samples_per_class"]),
                                  float(opts.get("spread", 0.5)), int(opts.get("seed", seed)))


def partition(cfg, ds, seed):
    opts = cfg.partition
    if opts["kind"] == "pathological":
        return partition_pathological(ds, cfg.N, int(opts["classes_per_client"]), seed)
    return partition_dirichlet(ds, cfg.N, float(opts.get("beta", 0.1)), seed,
                               min_samples=cfg.min_client_samples)


def init_state(cfg, seed):
    ds = load_dataset(cfg, seed)
    C = ds.C
    K = cfg.K if cfg.K is not None else C
    if K < C - 1:
        raise ConfigError(f"K={K} must be >= C-1={C - 1}")
    d_img = cfg.d_img if cfg.d_img is not None else ds.d
    if d_img != ds.d:
        raise ConfigError(f"d_img={d_img} differs from client input dim {ds.d}")
    plan = partition(cfg, ds, seed)
    etf = synthesize_etf(C, K, seed)
    gen = build_synthetic_generator(cfg.Z, cfg.H, d_img, seed)
    palette = [tuple(p) for p in cfg.palette]
    use_etf = cfg.ablation != "-ETF"
    clients = []
    for i, (tr, te) in enumerate(plan.splits):
        model = cl.build_client(i, palette, ds.d, cfg.feature_dim, K, cfg.H, etf, seed, use_etf=use_etf)
        clients.append(ClientSlot(model, ds.features[tr], ds.labels[tr].astype(np.int64),
                                  ds.features[te], ds.labels[te].astype(np.int64),
                                  len(plan.assignments[i])))
    transformer = sv.build_feature_transformer(K, cfg.H, seed, cfg.lr_server)
    state = RunState(cfg, seed, etf, gen, clients, transformer, K=K, C=C)
    if cfg.bridge:
        state.synthesize = BridgeSynthesizer(cfg.bridge, cfg.H, d_img)
    if cfg.ablation == "+CS":
        state.pairs = sv.random_pairs(gen, C, seed)
    return state


def select_participants(N, rho, round_idx, seed):
    k = math.ceil(rho * N - 1e-9)
    if k >= N:
        return list(range(N))
    picked = keyed_rng(seed, "participants", round_idx).choice(N, size=k, replace=False)
    return sorted(int(i) for i in picked)


def _noisy_pairs(pairs, noise, seed, round_idx, client_id):
    out = []
    for p in pairs:
        img = sv.perturb_gaussian(p.image, noise.image_scale, noise.image_prob,
                                  seed, "NG-image", round_idx, client_id, p.label)
        lat = sv.perturb_gaussian(p.latent, noise.vector_scale, noise.vector_prob,
                                  seed, "NG-latent", round_idx, client_id, p.label)
        out.append(ImageVectorPair(p.label, lat, img, p.round))
    return out


def _client_work(state, cid, round_idx, pairs, extract):
    cfg = state.config
    slot = state.clients[cid]
    model = slot.model
    cl.reinit_h_prime(model, round_idx, state.seed)
    arcface = CONTRASTIVE if cfg.ablation == "*L_i^A" else ArcFaceParams(cfg.s, cfg.m)
    la = lm = 0.0
    for epoch in range(cfg.local_epochs):
        la, lm = cl.local_train_epoch(
            model, slot.x_train, slot.y_train, pairs, cfg.mu, cfg.batch, cfg.lr_client,
            arcface=arcface, mix_pairs=cfg.ablation == "-Q",
            use_transfer=cfg.ablation not in ("-L_i^M", "-Q"),
            seed=state.seed, round_idx=round_idx, epoch=epoch)
    protos = cl.extract_prototypes(model, slot.x_train, slot.y_train) if extract else None
    return cid, la, lm, protos


def run_round(state, round_idx):
    cfg = state.config
    seed = state.seed
    collaborate = cfg.ablation != "-L_i^M"
    upload_enabled = collaborate and cfg.ablation != "+CS"
    participants = select_participants(cfg.N, cfg.rho, round_idx, seed)
    pair_cost = (state.gen.d_img + state.gen.H)

    # download
    deliveries = {}
    for cid in participants:
        pairs = state.pairs if collaborate else []
        if pairs and cfg.noise.pairs:
            pairs = _noisy_pairs(pairs, cfg.noise, seed, round_idx, cid)
        deliveries[cid] = pairs
        state.ledger.record(round_idx, cid, down=len(pairs) * pair_cost)

    # local training and prototype extraction
    jobs = [(cid, deliveries[cid]) for cid in participants]

    def work(job):
        try:
            return _client_work(state, job[0], round_idx, job[1], upload_enabled)
        except Exception as exc:
            raise RuntimeError(f"round {round_idx}, client {job[0]}: {exc}") from exc

    if cfg.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]
    results.sort(key=lambda r: r[0])
    loss_A = {cid: la for cid, la, _, _ in results}
    loss_M = {cid: lm for cid, _, lm, _ in results}

    # upload
    uploaded = []
    if upload_enabled:
        for cid, _, _, protos in results:
            if cfg.noise.prototypes:
                for c in protos.classes():
                    protos.entries[c] = sv.perturb_gaussian(
                        protos.entries[c], cfg.noise.vector_scale, cfg.noise.vector_prob,
                        seed, "NC", round_idx, cid, c)
            uploaded.append(protos)
            state.ledger.record(round_idx, cid, up=len(protos.entries) * state.K)

    # server alignment and pair generation for the next round
    trace, align_before, align_after = [], None, None
    if upload_enabled:
        bank = sv.PrototypeBank.from_sets(uploaded)
        if not cfg.server_warm_start:
            state.transformer = sv.build_feature_transformer(state.K, cfg.H, seed, cfg.lr_server,
                                                             restart=round_idx + 1)
        if cfg.probe_alignment and round_idx == 0:
            align_before = sv.alignment_mmd(state.transformer, bank, state.gen, seed, round_idx)
        trace = sv.train_feature_transformer(
            state.transformer, bank, state.gen, cfg.lam, cfg.server_epochs, cfg.server_batch,
            seed=seed, round_idx=round_idx,
            use_mmd=cfg.ablation != "-L^MMD", use_mse=cfg.ablation != "-L^MSE")
        if cfg.probe_alignment:
            align_after = sv.alignment_mmd(state.transformer, bank, state.gen, seed, round_idx + 1)
        state.centroids = sv.compute_global_centroids(state.transformer, bank, state.centroids)
        state.pairs = sv.generate_pairs(state.centroids, state.gen, round_idx, state.synthesize)

    # evaluation over every client
    acc = [cl.evaluate(slot.model, slot.x_test, slot.y_test) for slot in state.clients]
    weights = np.array([slot.n_total for slot in state.clients], dtype=np.float64)
    upload = {cid: state.ledger.get(round_idx, cid)[0] for cid in participants}
    download = {cid: state.ledger.get(round_idx, cid)[1] for cid in participants}
    return RoundReport(
        round=round_idx, participants=participants, accuracy=acc,
        mean_acc=float(np.mean(acc)),
        weighted_acc=float(np.dot(weights, acc) / weights.sum()),
        loss_A=loss_A, loss_M=loss_M,
        mean_loss_A=float(np.mean(list(loss_A.values()))),
        mean_loss_M=float(np.mean(list(loss_M.values()))),
        server_trace=trace, align_mmd=align_after, align_mmd_before=align_before,
        upload=upload, download=download)


def _fmt(x):
    return repr(float(x))


def rounds_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rep in reports:
        for cid, acc in enumerate(rep.accuracy):
            writer.writerow([rep.round, cid, _fmt(acc), _fmt(rep.loss_A.get(cid, 0.0)),
                             _fmt(rep.loss_M.get(cid, 0.0)), rep.upload.get(cid, 0),
                             rep.download.get(cid, 0)])
        writer.writerow([rep.round, -1, _fmt(rep.weighted_acc), _fmt(rep.mean_loss_A),
                         _fmt(rep.mean_loss_M), sum(rep.upload.values()),
                         sum(rep.download.values())])
    return buf.getvalue()


@dataclass
class TrialResult:
    seed: int
    reports: list
    ledger: CommLedger
    state: RunState

    @property
    def final(self):
        return self.reports[-1]


def run_trial(cfg, seed, on_round=None):
    state = init_state(cfg, seed)
    reports = []
    for t in range(cfg.rounds):
        rep = run_round(state, t)
        reports.append(rep)
        if on_round is not None:
            on_round(rep)
    return TrialResult(seed, reports, state.ledger, state)


def summarize(cfg, trials):
    finals = [t.final.weighted_acc for t in trials]
    means = [t.final.mean_acc for t in trials]
    summary = {
        "schema": SCHEMA,
        "ablation": cfg.ablation,
        "mode": cfg.mode,
        "rounds": cfg.rounds,
        "seeds": [t.seed for t in trials],
        "final_weighted_acc": finals,
        "final_mean_acc": means,
        "weighted_acc_mean": float(np.mean(finals)),
        "weighted_acc_std": float(np.std(finals)),
        "mean_acc_mean": float(np.mean(means)),
        "mean_acc_std": float(np.std(means)),
        "ledger": [ledger_totals(t.ledger) for t in trials],
        "align_mmd": [
            {"round0_before": t.reports[0].align_mmd_before, "final": t.final.align_mmd}
            for t in trials],
        "notes": {"evaluation": "every client is evaluated every round, participants or not",
                  "accuracy_weights": "client sample counts n_i"},
    }
    return summary


def run_experiment(cfg, out_dir=None, on_round=None):
    """Run every seed in ``cfg.seeds``; optionally write CSV/JSON outputs."""
    cfg.validate()
    trials = [run_trial(cfg, int(seed), on_round) for seed in cfg.seeds]
    summary = summarize(cfg, trials)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.resolved.json"), "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "rounds.csv"), "w", newline="") as fh:
            fh.write(rounds_csv(trials[0].reports))
        if len(trials) > 1:
            for t in trials:
                with open(os.path.join(out_dir, f"rounds.seed{t.seed}.csv"), "w", newline="") as fh:
                    fh.write(rounds_csv(t.reports))
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return {"summary": summary, "trials": trials}
