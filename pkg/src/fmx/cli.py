"""Command-line interface: train, eval, sample, sweep-k and gen-data.

Run configuration is a JSON document::

    {
      "model": {"I": 2, "D": 2, "K": [4, 4], "likelihood": "gaussian",
                "enc_hidden": 0, "dec_hidden": 0},
      "data": {"path": "data.fmxb", "labels": "labels.txt"}
              or {"synthetic": {"D": 2, "K": [4, 4], "N": 2000, ...}},
      "train": {"joint_iters": 3000, "learning_rate": 0.01, ...},
      "out": "runs/synthetic",
      "checkpoint_every": 1000
    }

The ``model`` section has no defaults. Relative paths are resolved against
the directory holding the config file. Exit codes: 0 success, 2 bad
configuration or I/O failure, 3 non-finite numbers during training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import struct
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data, elbo, nets, prior, trainer

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

CKPT_MAGIC = b"FMXC"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHQ")

EVAL_FIELDS = ("index", "recon", "kl_z", "kl_r", "bound")
SWEEP_FIELDS = ("K", "seeds", "recon", "kl_z", "kl_r", "bound")


class ConfigError(ValueError):
    pass


# -- configuration --------------------------------------------------------------

MODEL_KEYS = {"I", "D", "K", "likelihood", "enc_hidden", "dec_hidden"}
SYNTH_KEYS = {"D", "K", "N", "separation", "decoder", "label_fraction", "seed", "sigma",
              "obs_dim", "obs_noise"}
TOP_KEYS = {"model", "data", "train", "out", "checkpoint_every"}


def _train_fields():
    return {f.name for f in dataclasses.fields(trainer.TrainConfig)}


def _require(obj, key, kind, where):
    if key not in obj:
        raise ConfigError(f"{where}: missing required key {key!r}")
    val = obj[key]
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise ConfigError(f"{where}.{key}: expected an integer, got {val!r}")
    if kind is float and (isinstance(val, bool) or not isinstance(val, (int, float))):
        raise ConfigError(f"{where}.{key}: expected a number, got {val!r}")
    if kind is str and not isinstance(val, str):
        raise ConfigError(f"{where}.{key}: expected a string, got {val!r}")
    return float(val) if kind is float else val


def _unknown(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    extra = set(obj) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


def _k_list(val, where):
    if not isinstance(val, list) or not val or not all(isinstance(k, int) and not isinstance(k, bool)
                                                      and k >= 1 for k in val):
        raise ConfigError(f"{where}: K must be a non-empty list of positive integers")
    return tuple(val)


@dataclass(frozen=True)
class ModelSpec:
    I: int
    D: int
    Ks: tuple
    likelihood: str
    enc_hidden: int = 0
    dec_hidden: int = 0

    def to_json(self):
        return {"I": self.I, "D": self.D, "K": list(self.Ks), "likelihood": self.likelihood,
                "enc_hidden": self.enc_hidden, "dec_hidden": self.dec_hidden}


@dataclass(frozen=True)
class RunConfig:
    """Validated run description: model shape, data source, training settings."""

    model: ModelSpec
    train: trainer.TrainConfig
    data_path: str | None = None
    labels_path: str | None = None
    synthetic: dict | None = None
    out: str = "out"
    checkpoint_every: int = 0

    def to_json(self):
        tc = dataclasses.asdict(self.train)
        data_sec = {"synthetic": self.synthetic} if self.synthetic is not None else {"path": self.data_path}
        if self.labels_path is not None:
            data_sec["labels"] = self.labels_path
        return {"model": self.model.to_json(), "data": data_sec, "train": tc, "out": self.out,
                "checkpoint_every": self.checkpoint_every}


def parse_model(obj):
    _unknown(obj, MODEL_KEYS, "model")
    I = _require(obj, "I", int, "model")
    D = _require(obj, "D", int, "model")
    Ks = _k_list(obj.get("K"), "model.K")
    lik = _require(obj, "likelihood", str, "model")
    if I < 1 or D < 1:
        raise ConfigError("model: I and D must be positive")
    if len(Ks) != I:
        raise ConfigError(f"model: K lists {len(Ks)} blocks but I={I}")
    if lik not in nets.LIKELIHOODS:
        raise ConfigError(f"model.likelihood must be one of {nets.LIKELIHOODS}")
    hid = {}
    for key in ("enc_hidden", "dec_hidden"):
        v = obj.get(key, 0)
        if isinstance(v, bool) or not isinstance(v, int) or v < 0:
            raise ConfigError(f"model.{key} must be a nonnegative integer")
        hid[key] = v
    return ModelSpec(I, D, Ks, lik, **hid)


def parse_train(obj):
    obj = dict(obj or {})
    _unknown(obj, _train_fields(), "train")
    try:
        if "schedule" in obj:
            sch = obj["schedule"]
            _unknown(sch, {f.name for f in dataclasses.fields(trainer.Schedule)}, "train.schedule")
            obj["schedule"] = trainer.Schedule(**{k: float(v) for k, v in sch.items()})
        if "semi" in obj:
            semi = obj["semi"]
            _unknown(semi, {f.name for f in dataclasses.fields(elbo.SemiSupConfig)}, "train.semi")
            obj["semi"] = elbo.SemiSupConfig(**semi)
        for f in dataclasses.fields(trainer.TrainConfig):
            if f.name in obj and f.name not in ("schedule", "semi"):
                v = obj[f.name]
                if isinstance(v, bool) and f.type not in ("bool",):
                    raise ConfigError(f"train.{f.name}: unexpected boolean")
                if f.type == "bool" and not isinstance(v, bool):
                    raise ConfigError(f"train.{f.name}: expected true or false")
                if f.type == "int" and not isinstance(v, int):
                    raise ConfigError(f"train.{f.name}: expected an integer")
                if f.type in ("float", "float | None") and v is not None and not isinstance(v, (int, float)):
                    raise ConfigError(f"train.{f.name}: expected a number")
        return trainer.TrainConfig(**obj)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"train: {exc}") from exc


def parse_synthetic(obj, model: ModelSpec):
    _unknown(obj, SYNTH_KEYS, "data.synthetic")
    Ks = _k_list(obj.get("K", list(model.Ks)), "data.synthetic.K")
    out = {"D": int(obj.get("D", model.D)), "K": list(Ks), "N": _require(obj, "N", int, "data.synthetic"),
           "separation": _require(obj, "separation", float, "data.synthetic"),
           "decoder": obj.get("decoder", "affine"), "label_fraction": float(obj.get("label_fraction", 0.0)),
           "seed": int(obj.get("seed", 0)), "sigma": float(obj.get("sigma", 0.5)),
           "obs_dim": obj.get("obs_dim"), "obs_noise": float(obj.get("obs_noise", 0.1))}
    if out["decoder"] not in data.DECODERS:
        raise ConfigError(f"data.synthetic.decoder must be one of {data.DECODERS}")
    if out["N"] < 1 or out["separation"] < 0 or not 0 <= out["label_fraction"] <= 1:
        raise ConfigError("data.synthetic: need N >= 1, separation >= 0, label_fraction in [0, 1]")
    return out


def parse_config(obj, base_dir=Path(".")):
    """Validate a decoded JSON config; raises :class:`ConfigError`."""
    _unknown(obj, TOP_KEYS, "config")
    if "model" not in obj:
        raise ConfigError("config: the model section is required")
    model = parse_model(obj["model"])
    train = parse_train(obj.get("train"))
    d = obj.get("data")
    if d is None:
        raise ConfigError("config: the data section is required")
    _unknown(d, {"path", "labels", "synthetic"}, "data")
    if ("path" in d) == ("synthetic" in d):
        raise ConfigError("data: give exactly one of path or synthetic")

    def resolve(p):
        p = Path(p)
        return str(p if p.is_absolute() else base_dir / p)

    synth = parse_synthetic(d["synthetic"], model) if "synthetic" in d else None
    path = resolve(_require(d, "path", str, "data")) if "path" in d else None
    labels = resolve(_require(d, "labels", str, "data")) if "labels" in d else None
    every = obj.get("checkpoint_every", 0)
    if isinstance(every, bool) or not isinstance(every, int) or every < 0:
        raise ConfigError("checkpoint_every must be a nonnegative integer")
    out = obj.get("out", "out")
    if not isinstance(out, str):
        raise ConfigError("out must be a string")
    return RunConfig(model, train, path, labels, synth, resolve(out), every)


def load_config(path):
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(obj, path.parent)


def load_run_data(cfg: RunConfig):
    """Return (Dataset, LabelSet or None, SyntheticTruth or None)."""
    if cfg.synthetic is not None:
        s = cfg.synthetic
        ds, labels, truth = data.generate_synthetic(len(s["K"]), s["D"], s["K"], s["N"], s["separation"],
                                                    s["decoder"], s["label_fraction"], s["seed"],
                                                    s["sigma"], s["obs_dim"], s["obs_noise"])
        labels = labels if len(labels) else None
    else:
        if not Path(cfg.data_path).exists():
            raise ConfigError(f"dataset not found: {cfg.data_path}")
        ds = data.load_binary_images(cfg.data_path)
        labels = None
        tp = data.truth_path(cfg.data_path)
        truth = data.read_truth(tp) if Path(tp).exists() else None
    if cfg.labels_path is not None:
        if not Path(cfg.labels_path).exists():
            raise ConfigError(f"label file not found: {cfg.labels_path}")
        labels = data.load_labels(cfg.labels_path, cfg.model.Ks, ds.N)
    if labels is not None:
        bad = [n for n in labels.entries if n >= ds.N]
        if bad:
            raise ConfigError(f"labels refer to datum {bad[0]} but the dataset has {ds.N}")
    if cfg.model.likelihood == "bernoulli" and not ds.binary:
        raise ConfigError("Bernoulli likelihood needs binary data")
    return ds, labels, truth


# -- checkpoints ------------------------------------------------------------------

def _rng_state_to_json(rng):
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"])}


def _rng_from_json(obj):
    if obj.get("bit_generator") != "Philox":
        raise data.FormatError("checkpoint RNG is not a Philox generator")
    bg = np.random.Philox()
    bg.state = {"bit_generator": "Philox",
                "state": {"counter": np.array(obj["counter"], dtype=np.uint64),
                          "key": np.array(obj["key"], dtype=np.uint64)},
                "buffer": np.array(obj["buffer"], dtype=np.uint64),
                "buffer_pos": obj["buffer_pos"], "has_uint32": obj["has_uint32"],
                "uinteger": obj["uinteger"]}
    return np.random.Generator(bg)


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a run."""

    config: dict
    image_shape: tuple
    iteration: int
    encoder: nets.Network
    decoder: nets.Network
    adam_enc: trainer.AdamState
    adam_dec: trainer.AdamState
    adam_lam: trainer.AdamState
    state: prior.FactorialPriorState
    rng_state: dict

    def to_bytes(self):
        header = {"config": self.config, "image_shape": list(self.image_shape), "iteration": self.iteration,
                  "encoder": {"sizes": list(self.encoder.sizes), "activations": list(self.encoder.activations)},
                  "decoder": {"sizes": list(self.decoder.sizes), "activations": list(self.decoder.activations)},
                  "adam": [{"step": a.step, "lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps,
                            "size": int(a.m.size)} for a in (self.adam_enc, self.adam_dec, self.adam_lam)],
                  "rng": self.rng_state}
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        arrays = [self.encoder.params, self.decoder.params, self.adam_enc.m, self.adam_enc.v,
                  self.adam_dec.m, self.adam_dec.v, self.adam_lam.m, self.adam_lam.v]
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
        pb = prior.state_to_bytes(self.state)
        return (_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(hb)) + hb + body
                + struct.pack("<Q", len(pb)) + pb)

    @classmethod
    def from_bytes(cls, buf):
        if len(buf) < _CKPT_HEAD.size:
            raise data.FormatError("checkpoint truncated before header")
        magic, version, hlen = _CKPT_HEAD.unpack_from(buf, 0)
        if magic != CKPT_MAGIC:
            raise data.FormatError(f"not a checkpoint (magic {magic!r})")
        if version != CKPT_VERSION:
            raise data.FormatError(f"unsupported checkpoint version {version}")
        off = _CKPT_HEAD.size
        if len(buf) < off + hlen:
            raise data.FormatError("checkpoint truncated in header")
        header = json.loads(buf[off:off + hlen].decode("utf-8"))
        off += hlen
        enc_meta, dec_meta = header["encoder"], header["decoder"]

        def n_params(sizes):
            return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))

        ne, nd = n_params(enc_meta["sizes"]), n_params(dec_meta["sizes"])
        adam_meta = header["adam"]
        if len(adam_meta) != 3 or adam_meta[0]["size"] != ne or adam_meta[1]["size"] != nd:
            raise data.FormatError("checkpoint optimizer state does not match the networks")
        nl = adam_meta[2]["size"]
        counts = [ne, nd, ne, ne, nd, nd, nl, nl]
        need = 8 * sum(counts)
        if len(buf) < off + need + 8:
            raise data.FormatError("checkpoint truncated in parameters")
        arrays = []
        for n in counts:
            arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64))
            off += 8 * n
        (plen,) = struct.unpack_from("<Q", buf, off)
        off += 8
        if len(buf) != off + plen:
            raise data.FormatError("checkpoint prior section has the wrong length")
        state = prior.state_from_bytes(bytes(buf[off:off + plen]))
        enc = nets.Network(tuple(enc_meta["sizes"]), tuple(enc_meta["activations"]), arrays[0])
        dec = nets.Network(tuple(dec_meta["sizes"]), tuple(dec_meta["activations"]), arrays[1])
        a_enc, a_dec, a_lam = (
            trainer.AdamState(arrays[2 + 2 * j], arrays[3 + 2 * j],
                              **{k: v for k, v in adam_meta[j].items() if k != "size"})
            for j in range(3))
        return cls(header["config"], tuple(header["image_shape"]), header["iteration"], enc, dec,
                   a_enc, a_dec, a_lam, state, header["rng"])

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    @classmethod
    def from_trainer(cls, tr: trainer.Trainer, cfg: RunConfig, image_shape):
        return cls(cfg.to_json(), tuple(image_shape), tr.iteration, tr.model.encoder, tr.model.decoder,
                   tr.adam_enc, tr.adam_dec, tr.adam_lam, tr.state, _rng_state_to_json(tr.rng))

    def model(self):
        m = self.config["model"]
        return nets.Model(self.encoder, self.decoder, m["likelihood"], m["D"], m["I"])


def save_checkpoint(path, ckpt: Checkpoint):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return Checkpoint.from_bytes(path.read_bytes())


def trainer_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig, x, labels):
    tr = trainer.Trainer(ckpt.model(), ckpt.state, x, cfg.train, labels, rng=_rng_from_json(ckpt.rng_state))
    if ckpt.adam_lam.m.size != tr.adam_lam.m.size:
        raise ConfigError("checkpoint prior optimizer state does not match the labeled blocks")
    tr.adam_enc, tr.adam_dec, tr.adam_lam = ckpt.adam_enc, ckpt.adam_dec, ckpt.adam_lam
    tr.iteration = ckpt.iteration
    return tr


# -- CSV helpers ---------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row[f]) for f in fields])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- commands --------------------------------------------------------------------

def _apply_overrides(cfg: RunConfig, seed=None, out=None):
    if seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))
    if out is not None:
        cfg = dataclasses.replace(cfg, out=str(out))
    return cfg


def cmd_train(cfg: RunConfig, resume=None, log=print):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, labels, truth = load_run_data(cfg)
    m = cfg.model
    if cfg.synthetic is not None:
        # persist the generated data so eval can find it later
        dpath = out / "data.fmxb"
        data.write_dataset(dpath, ds)
        data.write_truth(data.truth_path(dpath), truth)
        if labels is not None:
            data.write_labels(out / "labels.txt", labels)
        cfg = dataclasses.replace(cfg, synthetic=None, data_path=str(dpath),
                                  labels_path=str(out / "labels.txt") if labels is not None else None)
    if m.likelihood == "bernoulli" and not ds.binary:
        raise ConfigError("Bernoulli likelihood needs binary data")
    metrics_path = out / "metrics.csv"
    rows = []
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config["model"] != m.to_json():
            raise ConfigError("checkpoint model shape does not match the config")
        tr = trainer_from_checkpoint(ckpt, cfg, ds.x, labels)
        if metrics_path.exists():
            rows = [r for r in read_csv(metrics_path) if int(r["iter"]) < tr.iteration]
    else:
        tr = trainer.Trainer.create(ds.x, cfg.train, m.D, m.Ks, m.likelihood, labels, m.enc_hidden,
                                    m.dec_hidden)
    ckpt_path = out / "checkpoint.fmxc"

    with open(metrics_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trainer.METRIC_FIELDS)
        for r in rows:
            w.writerow([r[f] for f in trainer.METRIC_FIELDS])

        def on_row(t, row):
            w.writerow([_fmt(row[f]) for f in trainer.METRIC_FIELDS])
            if cfg.checkpoint_every and t.iteration % cfg.checkpoint_every == 0:
                fh.flush()
                save_checkpoint(out / f"checkpoint-{t.iteration:08d}.fmxc",
                                Checkpoint.from_trainer(t, cfg, ds.image_shape))

        tr.run(callback=on_row)
    save_checkpoint(ckpt_path, Checkpoint.from_trainer(tr, cfg, ds.image_shape))
    log(f"trained {tr.iteration} iterations; checkpoint {ckpt_path}")
    return tr


def _checkpoint_run_config(ckpt: Checkpoint):
    return parse_config(ckpt.config, Path("."))


def cmd_eval(ckpt_path, out, data_path=None, seed=0, n_samples=1, log=print):
    ckpt = load_checkpoint(ckpt_path)
    cfg = _checkpoint_run_config(ckpt)
    if data_path is not None:
        cfg = dataclasses.replace(cfg, data_path=str(data_path), synthetic=None, labels_path=None)
    ds, _, truth = load_run_data(cfg)
    model = ckpt.model()
    if ds.P != model.n_pixels:
        raise ConfigError(f"dataset has {ds.P} values per datum, model expects {model.n_pixels}")
    pb = elbo.test_elbo(ds.x, model, ckpt.state, n_samples, rng=np.random.default_rng(seed))
    I = ckpt.state.I
    codes = np.stack([pb.resp[i].argmax(axis=1) for i in range(I)], axis=1)
    fields = EVAL_FIELDS + tuple(f"code_{i + 1}" for i in range(I))
    rows = []
    for n in range(ds.N):
        row = {"index": n, "recon": pb.recon[n], "kl_z": pb.kl_z[n], "kl_r": pb.kl_r[n], "bound": pb.bound[n]}
        row.update({f"code_{i + 1}": int(codes[n, i]) + 1 for i in range(I)})
        rows.append(row)
    mean = {"index": "mean", "recon": pb.recon.mean(), "kl_z": pb.kl_z.mean(), "kl_r": pb.kl_r.mean(),
            "bound": pb.bound.mean()}
    mean.update({f"code_{i + 1}": "" for i in range(I)})
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "eval.csv", fields, rows + [mean])
    result = {"bound": float(pb.bound.mean()), "codes": codes}
    if truth is not None and truth.codes.shape == codes.shape:
        Ks = ckpt.state.Ks
        perm = data.block_code_accuracy(codes, truth.codes, Ks)
        ident = [data.code_accuracy(codes[:, i], truth.codes[:, i], Ks[i], permute=False) for i in range(I)]
        write_csv(out / "accuracy.csv", ("block", "accuracy_best_permutation", "accuracy_identity"),
                  [{"block": i + 1, "accuracy_best_permutation": perm[i], "accuracy_identity": ident[i]}
                   for i in range(I)])
        result["accuracy"] = perm
        result["accuracy_identity"] = ident
        log("code accuracy per block: " + ", ".join(f"{a:.4f}" for a in perm))
    log(f"mean bound {mean['bound']:.6f} over {ds.N} data")
    return result


def parse_clamp(text, Ks):
    """Parse "i=k,..." with 1-based block and component indices."""
    clamp = {}
    if not text:
        return clamp
    for part in text.split(","):
        try:
            i, k = (int(v) for v in part.split("="))
        except ValueError as exc:
            raise ConfigError(f"bad clamp entry {part!r}; expected i=k") from exc
        if not 1 <= i <= len(Ks):
            raise ConfigError(f"clamp block {i} out of range 1..{len(Ks)}")
        if not 1 <= k <= Ks[i - 1]:
            raise ConfigError(f"clamp component {k} out of range 1..{Ks[i - 1]} for block {i}")
        clamp[i - 1] = k - 1
    return clamp


def write_pgm(path, img):
    """Write a 2-D array in [0, 1] as a binary (P5) graymap."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    pix = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def cmd_sample(ckpt_path, out, count, clamp_text=None, seed=0, log=print):
    ckpt = load_checkpoint(ckpt_path)
    if count < 1:
        raise ConfigError("--count must be positive")
    state = ckpt.state
    clamp = parse_clamp(clamp_text, state.Ks)
    rng = trainer.make_rng(seed, trainer.STREAM_TRAIN + 1)
    codes, zs = [], []
    for _ in range(count):
        code, z = prior.sample_latent(state, rng, clamp)
        codes.append(code.k)
        zs.append(z)
    model = ckpt.model()
    dec_out, _ = model.decoder.forward(np.array(zs))
    means = nets.decoded_mean(model.likelihood, dec_out)
    if model.likelihood == "gaussian":
        lo, hi = float(means.min()), float(means.max())
        means = (means - lo) / (hi - lo) if hi > lo else np.zeros_like(means)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    H, W = ckpt.image_shape
    rows = []
    for j, (k, img) in enumerate(zip(codes, means)):
        name = f"sample_{j:05d}.pgm"
        write_pgm(out / name, img.reshape(H, W))
        row = {"sample": j, "file": name}
        row.update({f"k_{i + 1}": ki + 1 for i, ki in enumerate(k)})
        rows.append(row)
    write_csv(out / "codes.csv", ("sample", "file") + tuple(f"k_{i + 1}" for i in range(state.I)), rows)
    log(f"wrote {count} samples to {out}")
    return np.array(codes)


def _sweep_job(args):
    cfg, K, seed = args
    m = dataclasses.replace(cfg.model, I=1, Ks=(K,))
    run = dataclasses.replace(cfg, model=m, train=dataclasses.replace(cfg.train, seed=seed))
    ds, _, _ = load_run_data(dataclasses.replace(run, labels_path=None))
    tr = trainer.Trainer.create(ds.x, run.train, m.D, m.Ks, m.likelihood, None, m.enc_hidden, m.dec_hidden)
    tr.run()
    pb = tr.evaluate(seed=seed)
    return {"K": K, "seed": seed, "recon": float(pb.recon.mean()), "kl_z": float(pb.kl_z.mean()),
            "kl_r": float(pb.kl_r.mean()), "bound": float(pb.bound.mean())}


def worker_count():
    env = os.environ.get("FMX_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"FMX_THREADS must be an integer, got {env!r}") from exc
        if n < 1:
            raise ConfigError("FMX_THREADS must be positive")
        return n
    return os.cpu_count() or 1


def cmd_sweep_k(cfg: RunConfig, k_list, seeds, log=print):
    """Train one single-block model per (K, seed); one averaged row per K."""
    if not k_list or any(k < 1 for k in k_list):
        raise ConfigError("--k-list needs positive integers")
    if cfg.synthetic is None and not Path(cfg.data_path).exists():
        raise ConfigError(f"dataset not found: {cfg.data_path}")
    jobs = [(cfg, K, s) for K in k_list for s in seeds]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    rows = []
    for K in k_list:
        rs = [r for r in results if r["K"] == K]
        rows.append({"K": K, "seeds": len(rs), **{f: float(np.mean([r[f] for r in rs]))
                                                  for f in ("recon", "kl_z", "kl_r", "bound")}})
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", SWEEP_FIELDS, rows)
    write_csv(out / "sweep_runs.csv", ("K", "seed", "recon", "kl_z", "kl_r", "bound"), results)
    log(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return rows


def cmd_gen_data(spec: dict, out, seed=None, log=print):
    """Write a synthetic dataset, its truth sidecar and (if any) its labels."""
    _unknown(spec, SYNTH_KEYS | {"I"}, "gen-data config")
    if "K" not in spec:
        raise ConfigError("gen-data config needs K")
    Ks = _k_list(spec["K"], "K")
    I = spec.get("I", len(Ks))
    if I != len(Ks):
        raise ConfigError("gen-data: I does not match the length of K")
    model = ModelSpec(len(Ks), int(spec.get("D", 2)), Ks, "gaussian")
    s = parse_synthetic({k: v for k, v in spec.items() if k != "I"}, model)
    if seed is not None:
        s["seed"] = seed
    ds, labels, truth = data.generate_synthetic(len(Ks), s["D"], s["K"], s["N"], s["separation"], s["decoder"],
                                                s["label_fraction"], s["seed"], s["sigma"], s["obs_dim"],
                                                s["obs_noise"])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data.write_dataset(out / "data.fmxb", ds)
    data.write_truth(data.truth_path(out / "data.fmxb"), truth)
    if len(labels):
        data.write_labels(out / "labels.txt", labels)
    log(f"wrote {ds.N} data of width {ds.P} to {out / 'data.fmxb'}")
    return ds, labels, truth


# -- entry point -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="fmx", description="Factorial mixture-prior VAE toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--checkpoint", help="resume from this checkpoint")

    e = sub.add_parser("eval", help="per-datum predictive bound and code recovery")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset (default: the one the model was trained on)")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--samples", type=int, default=1)

    s = sub.add_parser("sample", help="draw codes and decoded images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--clamp", help='fix components, e.g. "1=3,2=1" (1-based)')
    s.add_argument("--seed", type=int, default=0)

    k = sub.add_parser("sweep-k", help="train single-block models over a list of K")
    k.add_argument("--config", required=True)
    k.add_argument("--k-list", required=True)
    k.add_argument("--seeds", default="0", help="comma-separated seeds averaged per K")
    k.add_argument("--out")

    g = sub.add_parser("gen-data", help="write a synthetic factorial dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    return p


def _int_list(text, flag):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{flag} must be comma-separated integers") from exc


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = _apply_overrides(load_config(args.config), args.seed, args.out)
            cmd_train(cfg, resume=args.checkpoint)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.out, args.data, args.seed, args.samples)
        elif args.command == "sample":
            cmd_sample(args.checkpoint, args.out, args.count, args.clamp, args.seed)
        elif args.command == "sweep-k":
            cfg = _apply_overrides(load_config(args.config), None, args.out)
            cmd_sweep_k(cfg, _int_list(args.k_list, "--k-list"), _int_list(args.seeds, "--seeds"))
        elif args.command == "gen-data":
            path = Path(args.config)
            try:
                spec = json.loads(path.read_text())
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {path}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
            cmd_gen_data(spec, args.out, args.seed)
    except FloatingPointError as exc:
        print(f"fmx: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, data.FormatError, OSError, ValueError) as exc:
        print(f"fmx: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
