"""Experiment orchestration with a content-addressed stage cache.

Stages run in the order ingest, whiten, dict, pairs, smt, embed, eval. Each
stage's hash covers its upstream hash plus only the settings it reads, so a
change to (say) the KNN k recomputes evaluation alone. Artifacts live under
``<out>/artifacts`` named ``<stage>-<hash prefix>``; binary blobs carry the
full hash in their header and JSON sidecars in a ``config_hash`` field.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .core import CooccurrenceStats, SpectralEmbedding, solve_embedding
from .dataset_io import ImageDataset, load_dataset, with_flips
from .dictionary import Dictionary
from .errors import (
    DependencyError,
    FormatError,
    HashMismatchError,
    SMTError,
)
from .evaluation import KnnConfig, feature_baseline, knn_accuracy, knn_sweep, pca_fit
from .preprocess import WhiteningOperator
from .representation import PipelineConfig, SMTModel, embed_images_concat
from .sparse_features import GRAY_THRESHOLD

log = logging.getLogger(__name__)

STAGES = ("ingest", "whiten", "dict", "pairs", "smt", "embed", "eval")
# which subcommand produces each stage's artifact
PRODUCER = {
    "ingest": "ingest",
    "whiten": "train-dict",
    "dict": "train-dict",
    "pairs": "fit-smt",
    "smt": "fit-smt",
    "embed": "embed",
    "eval": "eval-knn",
}

PRESETS = {
    "mnist": {},
    "cifar10": {
        "encoder": "gq", "threshold": 0.3, "d_emb": 384, "drop_first": 16,
        "ks": 9, "stride": 9, "cooc_range": 4,
    },
    "cifar100": {
        "encoder": "gq", "threshold": 0.3, "d_emb": 384, "drop_first": 16,
        "ks": 9, "stride": 9, "cooc_range": 4,
    },
}


class StageError(SMTError):
    """A stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def _digest(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_root: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    seed: int = 0
    out_dir: str = "runs"
    knn_k: int = 30
    knn_temperature: float = 0.07
    knn_ks: tuple = (10, 30, 50)
    gray_threshold: float = GRAY_THRESHOLD
    pca_samples: int = 20000
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    # fields that only locate inputs/outputs and never change results
    LOCATION = ("data_root", "out_dir")

    @classmethod
    def for_dataset(cls, name, **overrides):
        if name not in PRESETS:
            raise ValueError(f"unknown dataset {name!r}")
        pipe = PipelineConfig(**PRESETS[name])
        return cls(dataset=name, pipeline=pipe, **overrides)

    def as_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "pipeline"}
        d["knn_ks"] = list(self.knn_ks)
        d["pipeline"] = self.pipeline.as_dict()
        return d

    def config_hash(self):
        d = self.as_dict()
        for key in self.LOCATION:
            d.pop(key)
        return _digest(d)

    # plain-text key = value form ----------------------------------------

    def to_text(self):
        lines = []
        d = self.as_dict()
        pipe = d.pop("pipeline")
        for key, value in list(d.items()) + list(pipe.items()):
            lines.append(f"{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        pairs = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"config line {n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            pairs[key] = value
        cfg = cls.for_dataset(pairs.get("dataset", "mnist"))
        return cfg.with_overrides(pairs)

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_text())

    def with_overrides(self, pairs):
        """New config with string (or typed) values applied to matching fields."""
        top = {f.name: f for f in fields(self) if f.name != "pipeline"}
        pipe = {f.name: f for f in fields(PipelineConfig)}
        top_kw, pipe_kw = {}, {}
        for key, value in pairs.items():
            if key in top:
                top_kw[key] = _parse_value(value, getattr(self, key), top[key].type)
            elif key in pipe:
                pipe_kw[key] = _parse_value(value, getattr(self.pipeline, key), pipe[key].type)
            else:
                raise FormatError(f"unknown config key {key!r}")
        return replace(self, pipeline=replace(self.pipeline, **pipe_kw), **top_kw)


def _format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(value, current, annotation):
    if not isinstance(value, str):
        return value
    text = value.strip()
    ann = str(annotation)
    if text.lower() == "none" and ("None" in ann or current is None):
        return None
    if isinstance(current, bool) or ann.startswith("bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise FormatError(f"not a boolean: {value!r}")
    try:
        if isinstance(current, tuple) or ann.startswith("tuple"):
            return tuple(int(x) for x in text.split(",") if x.strip())
        if "int" in ann and "float" not in ann:
            return int(float(text)) if "e" in text.lower() else int(text)
        if "float" in ann:
            return float(text)
    except ValueError:
        raise FormatError(f"cannot parse {value!r} as {ann}") from None
    return text


# artifact storage -------------------------------------------------------

class ArtifactStore:
    def __init__(self, root):
        self.root = Path(root) / "artifacts"
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, stage, h, suffix):
        return self.root / f"{stage}-{h[:16]}{suffix}"

    def load_blob(self, stage, h, cls):
        p = self.path(stage, h, ".bin")
        try:
            return cls.from_bytes(p.read_bytes(), expect_hash=h)
        except FileNotFoundError:
            return None
        except (HashMismatchError, FormatError) as exc:
            log.warning("discarding stale %s artifact: %s", stage, exc)
            return None

    def save_blob(self, stage, h, obj):
        p = self.path(stage, h, ".bin")
        tmp = p.with_suffix(".tmp")
        tmp.write_bytes(obj.to_bytes(h))
        tmp.replace(p)
        return p

    def load_json(self, stage, h):
        p = self.path(stage, h, ".json")
        try:
            data = json.loads(p.read_text())
        except (FileNotFoundError, json.JSONDecodeError):
            return None
        if data.get("config_hash") != h:
            log.warning("discarding stale %s artifact", stage)
            return None
        return data

    def save_json(self, stage, h, data):
        p = self.path(stage, h, ".json")
        p.write_text(json.dumps({"config_hash": h, **data}, indent=2) + "\n")
        return p


def save_matrix(path, z, meta, config_hash):
    """(n, d) little-endian float32 matrix plus a JSON sidecar at ``path + '.json'``."""
    z = np.ascontiguousarray(z, dtype="<f4")
    path = Path(path)
    path.write_bytes(z.tobytes())
    side = {"config_hash": config_hash, "rows": int(z.shape[0]), "cols": int(z.shape[1]), **meta}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2) + "\n")


def load_matrix(path, expect_hash=None):
    path = Path(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    if expect_hash is not None and side.get("config_hash") != expect_hash:
        raise HashMismatchError(f"{path.name} was produced by a different config")
    raw = path.read_bytes()
    rows, cols = side["rows"], side["cols"]
    if len(raw) != rows * cols * 4:
        raise FormatError(f"{path.name}: expected {rows}x{cols} float32 values")
    return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float32), side


def export_csv(z, labels, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"z{i}" for i in range(z.shape[1])])
        for lab, row in zip(labels, z):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])


# stage runner ------------------------------------------------------------

class Run:
    def __init__(self, cfg: ExperimentConfig, allow=STAGES):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.store = ArtifactStore(self.out)
        self.allow = set(allow)
        self.timings = {}
        self.hashes = {}

    def stage(self, name, key, h, load, compute, save):
        """Return the cached artifact for ``h`` or compute and store it."""
        t0 = time.perf_counter()
        obj = load(h)
        hit = obj is not None
        if not hit:
            if name not in self.allow:
                raise DependencyError(name, f"run `smt {PRODUCER[name]}` first")
            try:
                obj = compute()
            except Exception as exc:
                raise StageError(name, exc) from exc
            save(h, obj)
        self.timings[key] = {"seconds": round(time.perf_counter() - t0, 3), "cache_hit": hit}
        self.hashes[key] = h
        return obj


def _stage_hash(stage, upstream, params):
    return _digest({"stage": stage, "upstream": upstream, "params": params})


def _dataset_fingerprint(ds: ImageDataset):
    h = hashlib.sha256()
    h.update(str(ds.images.shape).encode())
    h.update(np.ascontiguousarray(ds.images).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    return h.hexdigest()


def load_splits(cfg: ExperimentConfig, data=None):
    if data is None:
        train = load_dataset(cfg.dataset, "train", cfg.data_root)
        test = load_dataset(cfg.dataset, "test", cfg.data_root)
    else:
        train, test = data
    if cfg.train_limit:
        train = train.subset(cfg.train_limit)
    if cfg.test_limit:
        test = test.subset(cfg.test_limit)
    return train, test


def stage_ingest(run: Run, data=None):
    cfg = run.cfg
    train, test = load_splits(cfg, data)
    fp = {"train": _dataset_fingerprint(train), "test": _dataset_fingerprint(test)}
    h = _stage_hash("ingest", None, {
        "dataset": cfg.dataset, "fingerprint": fp, "hflip": cfg.pipeline.hflip,
    })
    summary = {
        "dataset": cfg.dataset,
        "n_train": len(train),
        "n_test": len(test),
        "image_shape": list(train.images.shape[1:]),
        "num_classes": int(train.num_classes),
        "fingerprint": fp,
    }
    run.stage("ingest", "ingest", h, lambda h: run.store.load_json("ingest", h),
              lambda: summary, lambda h, obj: run.store.save_json("ingest", h, obj))
    return train, test, h


def _branches(cfg: ExperimentConfig):
    """(tag, PipelineConfig) per fitted pipeline; two when grayscale_concat is on."""
    p = cfg.pipeline
    if not p.grayscale_concat:
        return [("main", p)]
    gray = replace(p, grayscale=True, encoder=p.encoder, threshold=cfg.gray_threshold,
                   drop_first=0, grayscale_concat=False)
    return [("color", replace(p, grayscale_concat=False)), ("gray", gray)]


def fit_branch(run: Run, pcfg: PipelineConfig, tag, fit_images, ingest_hash, need_stats=False,
               until="smt"):
    """Whiten, dictionary, pair statistics and spectral solve for one pipeline.

    Pair statistics are only loaded when the solve has to run or when
    ``need_stats`` asks for them; otherwise the returned stats are None.
    Fitting stops after stage ``until``.
    """
    seed = run.cfg.seed
    model = SMTModel(pcfg)
    suffix = "" if tag == "main" else f":{tag}"

    h_w = _stage_hash("whiten", ingest_hash, {
        "patch_size": pcfg.patch_size, "radius": pcfg.radius, "grayscale": pcfg.grayscale,
        "lambda_rel": pcfg.lambda_rel, "whiten_samples": pcfg.whiten_samples, "seed": seed,
    })
    model.whitening = run.stage(
        "whiten", "whiten" + suffix, h_w,
        lambda h: run.store.load_blob("whiten", h, WhiteningOperator),
        lambda: model.fit_whitening(fit_images, seed),
        lambda h, obj: run.store.save_blob("whiten", h, obj),
    )
    if until == "whiten":
        return model, None, None

    h_d = _stage_hash("dict", h_w, {
        "K": pcfg.K, "method": pcfg.dict_method, "samples": pcfg.dict_samples,
        "spherical": pcfg.spherical, "epochs": pcfg.kmeans_epochs, "eta": pcfg.kmeans_eta,
        "seed": seed,
    })
    model.dictionary = run.stage(
        "dict", "dict" + suffix, h_d,
        lambda h: run.store.load_blob("dict", h, Dictionary),
        lambda: model.fit_dictionary(fit_images, seed),
        lambda h, obj: run.store.save_blob("dict", h, obj),
    )
    if until == "dict":
        return model, None, None

    h_p = _stage_hash("pairs", h_d, {
        "encoder": pcfg.encoder, "threshold": pcfg.threshold, "cooc_range": pcfg.cooc_range,
        "mode": pcfg.mode, "pair_second_moment": pcfg.pair_second_moment,
        "pair_budget": pcfg.pair_budget, "seed": seed,
    })
    h_s = _stage_hash("smt", h_p, {
        "d_emb": pcfg.d_emb, "drop_first": pcfg.drop_first, "v_floor_rel": pcfg.v_floor_rel,
    })
    cached = None if need_stats or until == "pairs" else run.store.load_blob("smt", h_s, SpectralEmbedding)
    stats = None
    if cached is None:
        stats = run.stage(
            "pairs", "pairs" + suffix, h_p,
            lambda h: run.store.load_blob("pairs", h, CooccurrenceStats),
            lambda: model.accumulate_stats(fit_images, seed),
            lambda h, obj: run.store.save_blob("pairs", h, obj),
        )
    else:
        run.hashes["pairs" + suffix] = h_p
    if until == "pairs":
        return model, stats, None
    model.embedding = run.stage(
        "smt", "smt" + suffix, h_s,
        lambda h: cached if cached is not None else run.store.load_blob("smt", h, SpectralEmbedding),
        lambda: solve_embedding(stats, pcfg.d_emb, pcfg.drop_first, pcfg.v_floor_rel),
        lambda h, obj: run.store.save_blob("smt", h, obj),
    )
    return model, stats, h_s


def fit_models(run: Run, train, ingest_hash, until="smt"):
    fit_images = with_flips(train).images if run.cfg.pipeline.hflip else train.images
    out = []
    for tag, pcfg in _branches(run.cfg):
        out.append((tag,) + fit_branch(run, pcfg, tag, fit_images, ingest_hash, until=until))
    return out


def _embed_all(models, images):
    if len(models) == 1:
        return models[0].embed_images(images)
    return embed_images_concat(images, models[0], models[1])


def stage_embed(run: Run, models, smt_hashes, train, test):
    cfg = run.cfg.pipeline
    h = _stage_hash("embed", smt_hashes, {"ks": cfg.ks, "stride": cfg.stride})
    paths = {s: run.store.path("embed", h, f"-{s}.f32") for s in ("train", "test")}

    def load(h):
        try:
            return {s: load_matrix(paths[s], expect_hash=h) for s in paths}
        except (FileNotFoundError, HashMismatchError, FormatError, KeyError):
            return None

    def compute():
        out = {}
        for split, ds in (("train", train), ("test", test)):
            z, layout = _embed_all(models, ds.images)
            out[split] = (z, {"layout": list(layout), "labels": ds.labels.tolist()})
        return out

    def save(h, obj):
        for s, (z, meta) in obj.items():
            save_matrix(paths[s], z, meta, h)

    result = run.stage("embed", "embed", h, load, compute, save)
    return result, h, paths


def stage_eval(run: Run, embedded, embed_hash):
    cfg = run.cfg
    h = _stage_hash("eval", embed_hash, {
        "k": cfg.knn_k, "temperature": cfg.knn_temperature, "ks": list(cfg.knn_ks),
    })

    def compute():
        (ztr, mtr), (zte, mte) = embedded["train"], embedded["test"]
        ytr, yte = np.asarray(mtr["labels"]), np.asarray(mte["labels"])
        ks = sorted(set(cfg.knn_ks) | {cfg.knn_k})
        sweep = knn_sweep(ztr, ytr, zte, yte, ks=ks, temperature=cfg.knn_temperature)
        best_k = max(sweep, key=lambda k: (sweep[k], -k))
        return {
            "k": cfg.knn_k,
            "temperature": cfg.knn_temperature,
            "top1": sweep[cfg.knn_k],
            "sweep": {str(k): sweep[k] for k in ks},
            "best_k": best_k,
            "best_top1": sweep[best_k],
        }

    res = run.stage("eval", "eval", h, lambda h: run.store.load_json("eval", h), compute,
                    lambda h, obj: run.store.save_json("eval", h, obj))
    res = {k: v for k, v in res.items() if k != "config_hash"}
    return res, h


@dataclass
class RunResult:
    report: dict
    timings: dict
    report_path: Path
    timings_path: Path


def run_pipeline(cfg: ExperimentConfig, data=None, until="eval", allow=STAGES) -> RunResult:
    """Run every stage up to ``until``; returns the report (also written as JSON)."""
    run = Run(cfg, allow)
    train, test, h_in = stage_ingest(run, data)
    report = {
        "dataset": cfg.dataset,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "n_train": len(train),
        "n_test": len(test),
    }
    if until != "ingest":
        stop = until if until in ("whiten", "dict", "pairs") else "smt"
        fitted = fit_models(run, train, h_in, stop)
        models = [m for _, m, _, _ in fitted]
        smt_hashes = [h for _, _, _, h in fitted]
        report["dictionary_size"] = cfg.pipeline.K
        report["d_emb"] = cfg.pipeline.d_emb
        if until in ("embed", "eval"):
            embedded, h_e, _ = stage_embed(run, models, smt_hashes, train, test)
            report["layout"] = embedded["test"][1]["layout"]
            report["z_len"] = int(embedded["test"][0].shape[1])
            if until == "eval":
                knn, _ = stage_eval(run, embedded, h_e)
                report["knn"] = knn
                report["top1"] = knn["top1"]
    report["stages"] = dict(run.hashes)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rp, tp = out / "report.json", out / "timings.json"
    rp.write_text(json.dumps(report, indent=2) + "\n")
    tp.write_text(json.dumps(run.timings, indent=2) + "\n")
    (out / "config.txt").write_text(cfg.to_text())
    return RunResult(report, run.timings, rp, tp)


# ablations -------------------------------------------------------------

def _code_sample(model: SMTModel, images, n, seed):
    rng = np.random.default_rng(seed)
    per = (images.shape[1] - model.config.patch_size + 1) * (images.shape[2] - model.config.patch_size + 1)
    n_img = min(len(images), max(1, -(-n // per)))
    sel = np.sort(rng.choice(len(images), size=n_img, replace=False))
    codes = sp.vstack(
        [model.codes(images[sel[i:i + model.config.batch_images]])
         for i in range(0, n_img, model.config.batch_images)],
        format="csr",
    )
    if codes.shape[0] > n:
        rows = np.sort(rng.choice(codes.shape[0], size=n, replace=False))
        codes = codes[rows]
    return codes


def run_ablation(cfg: ExperimentConfig, dict_sizes=(512, 2048, 8192), pca_dims=(), data=None):
    """Accuracy table for the three feature variants over dictionary sizes, plus PCA vs SMT
    over reduction dimensions at the configured K. Writes ``ablation.csv``."""
    if cfg.pipeline.grayscale_concat:
        raise ValueError("ablation runs a single pipeline; disable grayscale_concat")
    data = load_splits(cfg, data)
    train, test = data
    knn = KnnConfig(cfg.knn_k, cfg.knn_temperature)
    rows = []

    def acc(ztr, zte):
        return knn_accuracy(ztr, train.labels, zte, test.labels, knn)

    def fitted(K):
        c = replace(cfg, pipeline=replace(cfg.pipeline, K=K))
        run = Run(c)
        tr, te, h_in = stage_ingest(run, data)
        fit_images = with_flips(tr).images if c.pipeline.hflip else tr.images
        model, stats, _ = fit_branch(run, c.pipeline, "main", fit_images, h_in, need_stats=True)
        return model, stats, fit_images

    for K in dict_sizes:
        model, stats, _ = fitted(K)
        for variant in ("sparse_only", "sparse_whitened"):
            ztr, _ = feature_baseline(train.images, model, variant, stats)
            zte, _ = feature_baseline(test.images, model, variant, stats)
            rows.append({"curve": variant, "K": K, "dim": "", "top1": acc(ztr, zte)})
        ztr, _ = model.embed_images(train.images)
        zte, _ = model.embed_images(test.images)
        rows.append({"curve": "smt", "K": K, "dim": model.config.d_emb, "top1": acc(ztr, zte)})

    if pca_dims:
        K = cfg.pipeline.K
        model, stats, fit_images = fitted(K)
        codes = _code_sample(model, fit_images, cfg.pca_samples, cfg.seed)
        for dim in pca_dims:
            pca = pca_fit(codes, dim)
            offset = pca.mean @ pca.components.T
            ztr, _ = model.embed_images(train.images, pca.components, offset=offset)
            zte, _ = model.embed_images(test.images, pca.components, offset=offset)
            rows.append({"curve": "pca", "K": K, "dim": dim, "top1": acc(ztr, zte)})
            emb = solve_embedding(stats, dim, model.config.drop_first, model.config.v_floor_rel)
            ztr, _ = model.embed_images(train.images, emb.P)
            zte, _ = model.embed_images(test.images, emb.P)
            rows.append({"curve": "smt_dim", "K": K, "dim": dim, "top1": acc(ztr, zte)})

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["curve", "K", "dim", "top1"])
        w.writeheader()
        w.writerows(rows)
    return rows
