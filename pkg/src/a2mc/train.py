"""Pretraining loop, optimizers, KNN and linear-probe evaluation, and the
component-ablation harness.

One training step: basic-augment two views of each sample; key-encode one
(no gradient) and query-encode the other; attack the raw sample and
weak/strong-augment the attacked version into hard positive branches; build
the contrast loss per the component flags; descend the query encoder (SGD
with momentum and weight decay); ascend or FIFO-update the memory bank; and
momentum-update the key encoder. Bank gradients come from a second backward
pass at the bank temperature with all features held constant.

Component flags map onto the loss like this: with both attack and mc off the
loss is plain InfoNCE on the basic branch; turning attack on routes the
weak/strong branches through the attacked sequence and adds their one-hot
terms; turning mc on swaps the strong branch's one-hot target for the
gradient-blocked basic-branch distribution; turning pnm on mixes each
branch's positive into the bank (per mixing coefficient) and switches the
bank from FIFO to adversarial updates.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as tc
from .attack import attack_batch
from .augment import apply
from .bank import MemoryBank, adversarial_update, fifo_enqueue, init_bank
from .config import RunConfig
from .data import LabeledDataset, resample_time
from .encoder import (
    PARAM_NAMES,
    EncoderParams,
    EncoderState,
    encode_batch,
    init_attack_head,
    init_encoder_params,
    load_checkpoint,
    make_param_leaves,
    momentum_update,
    save_checkpoint,
    sequence_to_input,
)
from .errors import ConfigError, ContractError, NumericError, TrainingAborted
from .losses import batched_distributional_term, batched_one_hot_term
from .rng import RngStream
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

STEP_CSV_HEADER = "epoch,step,loss,l1,l2,l3,bank_grad_norm"
EPOCH_CSV_HEADER = "epoch,lr,mean_loss,mean_l1,mean_l2,mean_l3"
CSV_SCHEMA_LINE = "# a2mc-metrics v1"


@dataclass
class MetricsRecord:
    step_rows: list = field(default_factory=list)
    epoch_rows: list = field(default_factory=list)
    eval_rows: list = field(default_factory=list)
    wall_time_s: float = 0.0

    def append_epoch(self, row: dict):
        if self.epoch_rows and row["epoch"] <= self.epoch_rows[-1]["epoch"]:
            raise ContractError("epoch metric rows must be strictly increasing")
        self.epoch_rows.append(row)


@dataclass
class PretrainResult:
    state: EncoderState
    bank: MemoryBank
    metrics: MetricsRecord
    run_dir: Path | None = None
    checkpoint_path: Path | None = None


class SgdOptimizer:
    """SGD with momentum; weight decay is added to the gradient."""

    def __init__(self, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict = {}

    def step(self, params: EncoderParams, grads: dict, lr: float):
        for name in PARAM_NAMES:
            theta = params.arrays[name]
            g = grads[name].astype(np.float32) + np.float32(self.weight_decay) * theta
            buf = self.buffers.get(name)
            buf = g if buf is None else np.float32(self.momentum) * buf + g
            self.buffers[name] = buf
            params.arrays[name] = theta - np.float32(lr) * buf


def lr_at_epoch(base_lr: float, drop_epochs, epoch: int) -> float:
    drops = sum(1 for d in drop_epochs if epoch >= d)
    return base_lr * (0.1 ** drops)


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def _stack_augmented(sequences, spec, streams) -> np.ndarray:
    out = [sequence_to_input(apply(spec, s, st)) for s, st in zip(sequences, streams)]
    return np.stack(out)


def _loss_terms(f1, f2, f3, f0, m0_rows, lambdas, tau, renormalize, flags):
    """Active contrast terms as (l1, l2, l3) tensors; inactive terms are None."""
    if flags.attack or flags.mc:
        l1 = batched_one_hot_term(f1, f0, m0_rows, lambdas, tau, renormalize)
        if flags.mc:
            l2 = batched_distributional_term(f2, f3, f0, m0_rows, lambdas, tau, renormalize)
        else:
            l2 = batched_one_hot_term(f2, f0, m0_rows, lambdas, tau, renormalize)
        l3 = batched_one_hot_term(f3, f0, m0_rows, lambdas, tau, renormalize)
        return l1, l2, l3
    return None, None, batched_one_hot_term(f3, f0, m0_rows, lambdas, tau, renormalize)


def _sum_terms(l1, l2, l3):
    total = l3
    if l1 is not None:
        total = tc.add(tc.add(l1, l2), l3)
    return total


def pipeline_hash(cfg: RunConfig) -> str:
    """Hash of the hard-positive (f1/f2) pipeline structure: attack on/off,
    attack parameters when on, and both augmentation parameter sets."""
    doc = {
        "attack": bool(cfg.train.ablation.attack),
        "weak": cfg.to_dict()["augment"]["weak"],
        "strong": cfg.to_dict()["augment"]["strong"],
    }
    if cfg.train.ablation.attack:
        doc["attack_cfg"] = cfg.to_dict()["attack"]
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def dataset_inputs(ds: LabeledDataset, target_frames: int) -> np.ndarray:
    """(N, T, J*3) float32 inputs: full-length resample, no augmentation."""
    return np.stack([
        sequence_to_input(resample_time(s, target_frames)) for s in ds.sequences
    ])


def encode_features(params: EncoderParams, inputs: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Unit-norm features for pre-resampled inputs, in deterministic chunks."""
    outs = [encode_batch(params, inputs[i : i + chunk]).numpy()
            for i in range(0, len(inputs), chunk)]
    return np.concatenate(outs, axis=0)


def _warmup_bank(params: EncoderParams, inputs: np.ndarray, capacity: int,
                 mode: str) -> MemoryBank:
    take = min(len(inputs), capacity)
    feats = encode_features(params, inputs[:take])
    return init_bank(feats, capacity, mode)


class _Run:
    """Mutable state of one pretraining run."""

    def __init__(self, cfg: RunConfig, train_data: LabeledDataset):
        if len(train_data) == 0:
            raise ConfigError("training dataset is empty")
        self.cfg = cfg
        self.data = train_data
        self.dims = cfg.encoder_dims()
        self.inputs = dataset_inputs(train_data, cfg.data.num_frames)
        self.flags = cfg.train.ablation
        self.lambdas = cfg.bank.lambdas if self.flags.pnm else ()
        self.bank_mode = "adversarial" if self.flags.pnm else "fifo"
        self.opt = SgdOptimizer(cfg.train.sgd_momentum, cfg.train.weight_decay)
        self.start_epoch = 0
        self.global_step = 0

    def fresh_init(self):
        cfg = self.cfg
        query = init_encoder_params(self.dims, RngStream.from_name(cfg.seed, "init.q"))
        key = query.copy()
        head = init_attack_head(self.dims, cfg.num_attack_classes,
                                RngStream.from_name(cfg.seed, "init.head"))
        self.state = EncoderState(self.dims, query, key, head)
        self.bank = _warmup_bank(key, self.inputs, cfg.bank.capacity, self.bank_mode)

    def resume_from(self, path):
        state, extra, meta = load_checkpoint(path)
        if "pnm.M0" not in extra:
            raise ContractError("checkpoint is missing the memory bank tensor 'pnm.M0'")
        self.state = state
        self.bank = MemoryBank(extra["pnm.M0"], mode=meta.get("bank_mode", self.bank_mode),
                               cursor=int(meta.get("bank_cursor", 0)))
        for name in PARAM_NAMES:
            buf = extra.get(f"opt.m.{name}")
            if buf is not None:
                self.opt.buffers[name] = buf
        self.start_epoch = int(meta.get("epoch_completed", 0))
        self.global_step = int(meta.get("global_step", 0))

    def checkpoint_meta(self, epoch_completed: int) -> dict:
        return {
            "epoch_completed": epoch_completed,
            "global_step": self.global_step,
            "bank_cursor": self.bank.cursor,
            "bank_mode": self.bank.mode,
            "encoder_dims": self.dims.__dict__,
            "config": self.cfg.to_dict(),
            "version": __version__,
        }

    def save(self, path, epoch_completed: int):
        extra = {"pnm.M0": self.bank.rows.astype(np.float32)}
        for name, buf in self.opt.buffers.items():
            extra[f"opt.m.{name}"] = buf
        save_checkpoint(path, self.state, extra, self.checkpoint_meta(epoch_completed))

    # -- one optimization step over one batch

    def step(self, epoch: int, batch_idx: int, sample_indices) -> dict:
        cfg, flags = self.cfg, self.flags
        seqs = [self.data.sequences[i] for i in sample_indices]
        tagged = [(int(i), s) for i, s in zip(sample_indices, seqs)]

        def streams(branch):
            return [RngStream.from_name(cfg.seed, f"aug.e{epoch}.i{i}").split(branch)
                    for i, _ in tagged]

        x0 = _stack_augmented(seqs, cfg.weak_augment, streams("basic0"))
        x3 = _stack_augmented(seqs, cfg.weak_augment, streams("basic3"))
        f0 = encode_batch(self.state.key, x0).numpy()

        need_branches = flags.attack or flags.mc
        if flags.attack:
            raw = self.inputs[np.asarray(sample_indices)]  # resampled, un-augmented
            attacked = attack_batch(raw, self.state.query, self.state.head, cfg.attack)
            if attacked.warned.any():
                log.warning("attack aborted on %d sample(s) at epoch %d step %d",
                            int(attacked.warned.sum()), epoch, batch_idx)
            t_cfg = cfg.data.num_frames
            substrate = [
                s.with_frames(attacked.frames[j].reshape(t_cfg, s.num_joints, 3))
                for j, s in enumerate(seqs)
            ]
        else:
            substrate = seqs
        weak = _stack_augmented(substrate, cfg.weak_augment, streams("weak"))
        strong = _stack_augmented(substrate, cfg.strong_augment, streams("strong"))

        tape = Tape()
        leaves = make_param_leaves(self.state.query, tape)
        f3 = encode_batch(self.state.query, x3, tape, leaves)
        f1 = f2 = None
        if need_branches:
            f1 = encode_batch(self.state.query, weak, tape, leaves)
            f2 = encode_batch(self.state.query, strong, tape, leaves)

        m0_const = Tensor(self.bank.rows)
        l1, l2, l3 = _loss_terms(f1, f2, f3, Tensor(f0), m0_const, self.lambdas,
                                 cfg.loss.tau, cfg.bank.renormalize, flags)
        total = _sum_terms(l1, l2, l3)
        grads = backward(total)
        lr = lr_at_epoch(cfg.train.lr, cfg.train.lr_drop_epochs, epoch)
        self.opt.step(self.state.query, {n: grads[leaves[n]] for n in PARAM_NAMES}, lr)

        bank_grad_norm = 0.0
        if flags.pnm:
            f1v = Tensor(f1.numpy()) if f1 is not None else None
            f2v = Tensor(f2.numpy()) if f2 is not None else None
            f3v = Tensor(f3.numpy())
            tape_b = Tape()
            m0_leaf = tape_b.leaf(self.bank.rows)
            bl1, bl2, bl3 = _loss_terms(f1v, f2v, f3v, Tensor(f0), m0_leaf,
                                        self.lambdas, cfg.loss.tau_bank,
                                        cfg.bank.renormalize, flags)
            grad_m0 = backward(_sum_terms(bl1, bl2, bl3))[m0_leaf]
            bank_grad_norm = float(np.linalg.norm(grad_m0))
            self.bank = adversarial_update(self.bank, grad_m0, cfg.bank.beta)
        else:
            self.bank = fifo_enqueue(self.bank, f0)

        self.state.key = momentum_update(self.state.key, self.state.query,
                                         cfg.train.alpha)
        self.global_step += 1
        return {
            "epoch": epoch,
            "step": self.global_step,
            "loss": total.item(),
            "l1": l1.item() if l1 is not None else 0.0,
            "l2": l2.item() if l2 is not None else 0.0,
            "l3": l3.item(),
            "bank_grad_norm": bank_grad_norm,
        }


def pretrain(train_data: LabeledDataset, cfg: RunConfig, run_dir=None,
             resume_from=None) -> PretrainResult:
    """Run the full pretraining loop; optionally write run artifacts.

    The run directory (when given) receives the resolved config, step and
    epoch metrics CSVs, a tool version string, the final checkpoint, and a
    summary with wall time. Loss trajectories are a pure function of
    (config, dataset), so two identical invocations write identical CSVs.
    """
    t_start = time.perf_counter()
    run = _Run(cfg, train_data)
    if resume_from is not None:
        run.resume_from(resume_from)
    else:
        run.fresh_init()

    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json() + "\n")
        (out / "VERSION").write_text(__version__ + "\n")

    metrics = MetricsRecord()
    n = len(train_data)
    batch = cfg.train.batch_size
    try:
        for epoch in range(run.start_epoch, cfg.train.epochs):
            perm = RngStream.from_name(cfg.seed, f"shuffle.e{epoch}").permutation(n)
            sums = np.zeros(4)
            count = 0
            for b in range(0, n, batch):
                row = run.step(epoch, b // batch, perm[b : b + batch])
                metrics.step_rows.append(row)
                sums += (row["loss"], row["l1"], row["l2"], row["l3"])
                count += 1
            metrics.append_epoch({
                "epoch": epoch,
                "lr": lr_at_epoch(cfg.train.lr, cfg.train.lr_drop_epochs, epoch),
                "mean_loss": sums[0] / count,
                "mean_l1": sums[1] / count,
                "mean_l2": sums[2] / count,
                "mean_l3": sums[3] / count,
            })
            if out is not None and cfg.train.checkpoint_every and \
                    (epoch + 1) % cfg.train.checkpoint_every == 0:
                run.save(out / f"checkpoint_e{epoch + 1}.bin", epoch + 1)
    except NumericError as err:
        diag = {"error": str(err), "epoch": len(metrics.epoch_rows) + run.start_epoch,
                "step": run.global_step}
        ckpt = None
        if out is not None:
            ckpt = out / "checkpoint_abort.bin"
            run.save(ckpt, diag["epoch"])
            (out / "abort.json").write_text(json.dumps(diag, indent=2) + "\n")
            _write_metrics_csvs(out, metrics)
        raise TrainingAborted(f"non-finite loss: {err}", checkpoint_path=ckpt,
                              diagnostics=diag) from err

    metrics.wall_time_s = time.perf_counter() - t_start
    ckpt_path = None
    if out is not None:
        ckpt_path = out / "checkpoint.bin"
        run.save(ckpt_path, cfg.train.epochs)
        _write_metrics_csvs(out, metrics)
        (out / "summary.json").write_text(json.dumps({
            "wall_time_s": metrics.wall_time_s,
            "epochs": cfg.train.epochs,
            "steps": run.global_step,
            "final_mean_loss": metrics.epoch_rows[-1]["mean_loss"] if metrics.epoch_rows else None,
            "pipeline_hash": pipeline_hash(cfg),
            "version": __version__,
        }, indent=2) + "\n")
    return PretrainResult(run.state, run.bank, metrics, out, ckpt_path)


def _write_metrics_csvs(out: Path, metrics: MetricsRecord):
    lines = [CSV_SCHEMA_LINE, STEP_CSV_HEADER]
    for r in metrics.step_rows:
        lines.append(",".join([str(r["epoch"]), str(r["step"]), _fmt(r["loss"]),
                               _fmt(r["l1"]), _fmt(r["l2"]), _fmt(r["l3"]),
                               _fmt(r["bank_grad_norm"])]))
    (out / "steps.csv").write_text("\n".join(lines) + "\n")
    lines = [CSV_SCHEMA_LINE, EPOCH_CSV_HEADER]
    for r in metrics.epoch_rows:
        lines.append(",".join([str(r["epoch"]), _fmt(r["lr"]), _fmt(r["mean_loss"]),
                               _fmt(r["mean_l1"]), _fmt(r["mean_l2"]),
                               _fmt(r["mean_l3"])]))
    (out / "epochs.csv").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# evaluation


def knn_eval(params: EncoderParams, train_data: LabeledDataset,
             test_data: LabeledDataset, k: int = 1,
             target_frames: int | None = None) -> float:
    """Cosine-similarity majority vote among the k nearest training features.

    Features come from clean full-length resampled sequences. Similarity ties
    break toward the lower training index; vote ties toward the lower class id.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if len(train_data) == 0 or len(test_data) == 0:
        raise ConfigError("knn evaluation needs non-empty splits")
    t = target_frames or train_data.sequences[0].num_frames
    train_feats = encode_features(params, dataset_inputs(train_data, t))
    test_feats = encode_features(params, dataset_inputs(test_data, t))
    return knn_accuracy(train_feats, train_data.labels, test_feats,
                        test_data.labels, test_data.num_classes, k)


def knn_accuracy(train_feats, train_labels, test_feats, test_labels,
                 num_classes: int, k: int) -> float:
    sims = test_feats @ train_feats.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    votes = train_labels[order]
    if k == 1:
        pred = votes[:, 0]
    else:
        counts = np.zeros((len(test_feats), num_classes), dtype=np.int64)
        for col in range(k):
            np.add.at(counts, (np.arange(len(test_feats)), votes[:, col]), 1)
        pred = counts.argmax(axis=1)  # argmax takes the smallest class id on ties
    return float((pred == np.asarray(test_labels)).mean())


def linear_probe(params: EncoderParams, train_data: LabeledDataset,
                 test_data: LabeledDataset, cfg: RunConfig) -> float:
    """Train a softmax linear classifier on frozen features; returns test
    accuracy. Asserts that the encoder is bit-identical before and after."""
    frozen = params.state_bytes()
    t = cfg.data.num_frames
    xtr = encode_features(params, dataset_inputs(train_data, t)).astype(np.float64)
    xte = encode_features(params, dataset_inputs(test_data, t)).astype(np.float64)
    ytr = np.asarray(train_data.labels)
    c = train_data.num_classes
    onehot = np.eye(c)[ytr]

    ev = cfg.eval
    epochs, base_lr = ev.probe_epochs, ev.probe_lr
    drops = (max(1, int(round(epochs * 50 / 80))), max(1, int(round(epochs * 70 / 80))))
    w = np.zeros((xtr.shape[1], c))
    b = np.zeros(c)
    buf_w = np.zeros_like(w)
    buf_b = np.zeros_like(b)
    mom = ev.probe_momentum
    n = len(xtr)
    for epoch in range(epochs):
        lr = base_lr * (0.1 ** sum(1 for d in drops if epoch >= d))
        perm = RngStream.from_name(cfg.seed, f"probe.e{epoch}").permutation(n)
        for start in range(0, n, ev.probe_batch):
            idx = perm[start : start + ev.probe_batch]
            xb, yb = xtr[idx], onehot[idx]
            logits = xb @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            diff = (p - yb) / len(idx)
            gw, gb = xb.T @ diff, diff.sum(axis=0)
            buf_w = mom * buf_w + gw
            buf_b = mom * buf_b + gb
            w -= lr * buf_w
            b -= lr * buf_b
    if params.state_bytes() != frozen:
        raise ContractError("encoder parameters changed during linear probing")
    pred = (xte @ w + b).argmax(axis=1)
    return float((pred == np.asarray(test_data.labels)).mean())


# ---------------------------------------------------------------------------
# ablation harness

ABLATION_ROWS = (
    ("B1", False, False, False),
    ("B2", False, True, False),
    ("B3", True, False, False),
    ("B4", True, False, True),
    ("full", True, True, True),
)


def ablate(base_cfg: RunConfig, train_data: LabeledDataset,
           test_data: LabeledDataset, out_dir=None) -> list:
    """Run the five component configurations with a shared seed and dataset;
    returns one row per configuration with both evaluation accuracies."""
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for name, attack, pnm, mc in ABLATION_ROWS:
        cfg = base_cfg.with_ablation(attack, pnm, mc)
        result = pretrain(train_data, cfg, run_dir=(out / name) if out else None)
        row = {
            "name": name,
            "attack": attack,
            "pnm": pnm,
            "mc": mc,
            "knn_acc": knn_eval(result.state.query, train_data, test_data,
                                base_cfg.eval.knn_k, base_cfg.data.num_frames),
            "linear_acc": linear_probe(result.state.query, train_data, test_data, cfg),
            "pipeline_hash": pipeline_hash(cfg),
        }
        log.info("ablation %s: knn=%.4f linear=%.4f", name, row["knn_acc"], row["linear_acc"])
        rows.append(row)
    if out is not None:
        lines = [CSV_SCHEMA_LINE, "name,attack,pnm,mc,knn_acc,linear_acc,pipeline_hash"]
        for r in rows:
            lines.append(",".join([r["name"], str(int(r["attack"])), str(int(r["pnm"])),
                                   str(int(r["mc"])), _fmt(r["knn_acc"]),
                                   _fmt(r["linear_acc"]), r["pipeline_hash"]]))
        (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    return rows
