"""Stage orchestrator: config-driven commands chaining phantom data generation,
inpainting, synthesis, segmentation training and evaluation, with resumable
atomically written artifacts."""

import argparse
import hashlib
import json
import os
import shutil
import sys

import numpy as np
import torch
import yaml

from . import evaluation, maskops, mcs, ms, ncg, phantom, volumes
from .config import build_config, validate_config
from .errors import (ConfigInvalidError, ConfigParseError, MissingArtifactError,
                     NoResultsError, PipelineError)

STAGES = ["phantom", "inpaint-train", "inpaint-apply", "mcs-train",
          "synthesize", "seg-train", "infer", "evaluate"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4


# --- workspace helpers ---

def ws_path(cfg, *parts):
    return os.path.join(cfg.get("workspace"), *parts)


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _signature(*parts):
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()


def _record_path(cfg, stage):
    return ws_path(cfg, "state", f"{stage}.json")


def _load_record(cfg, stage):
    path = _record_path(cfg, stage)
    if not os.path.exists(path):
        return None
    with open(path) as f:
        return json.load(f)


def _write_record(cfg, stage, signature, outputs):
    os.makedirs(ws_path(cfg, "state"), exist_ok=True)
    payload = {"stage": stage, "signature": signature, "outputs": outputs}
    _atomic_write_text(_record_path(cfg, stage), json.dumps(payload, indent=2, sort_keys=True))


def _atomic_write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _atomic_case_save(case, target_dir):
    tmp = f"{target_dir}.tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    volumes.save_case(case, tmp)
    if os.path.exists(target_dir):
        shutil.rmtree(target_dir)
    os.replace(tmp, target_dir)


def _up_to_date(cfg, stage, signature):
    record = _load_record(cfg, stage)
    if record is None or record.get("signature") != signature:
        return False
    return all(os.path.exists(ws_path(cfg, out)) for out in record.get("outputs", []))


def _require(cfg, relpath, producer):
    path = ws_path(cfg, relpath)
    if not os.path.exists(path):
        raise MissingArtifactError(
            f"missing artifact '{relpath}' (run the '{producer}' stage first)")
    return path


class _lock:
    """One stage process at a time per workspace."""

    def __init__(self, cfg):
        os.makedirs(cfg.get("workspace"), exist_ok=True)
        self.path = ws_path(cfg, "lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PipelineError(
                f"workspace is locked ({self.path}); another stage may be running") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        if os.path.exists(self.path):
            os.remove(self.path)


# --- dataset access ---

def _manifest(cfg):
    path = _require(cfg, os.path.join("data", "raw", "manifest.yaml"), "phantom")
    with open(path) as f:
        return yaml.safe_load(f)


def _splits(cfg):
    path = _require(cfg, os.path.join("data", "raw", "splits.json"), "phantom")
    with open(path) as f:
        return json.load(f)


def _load_cases(cfg, sub, ids):
    return [volumes.load_case(ws_path(cfg, "data", sub, cid), cid) for cid in ids]


def _mcs_config(cfg):
    m = cfg["mcs"]
    return mcs.McsConfig(
        f=m["f"], base_channels=m["base_channels"],
        codebook=mcs.CodebookConfig(m["codebook_size"], m["embedding_dim"], m["commitment_weight"]),
        T=m["T"], beta_start=m["beta_start"], beta_end=m["beta_end"], patch=m["patch"],
        denoiser_channels=m["denoiser_channels"], ae_steps=m["ae_steps"],
        ldm_steps=m["ldm_steps"], batch_size=m["batch_size"],
        ldm_batch_size=m["ldm_batch_size"], lr=m["lr"])


def _seg_tag(cfg):
    tag = cfg.get("ms.tag")
    if tag:
        return tag
    return "real" if cfg.get("ms.p_synth") == 0 else "hybrid"


# --- stages ---

def stage_phantom(cfg):
    pcfg = phantom.PhantomConfig(
        grid=tuple(cfg.get("phantom.grid")),
        n_cases=cfg.get("phantom.n_cases"),
        tumor_prob=cfg.get("phantom.tumor_prob"),
        misalign_voxels=cfg.get("phantom.misalign_voxels"),
        tumor_axes_range=tuple(cfg.get("phantom.tumor_axes_range")),
        seed=cfg.get("seed"))
    cases = phantom.generate_dataset(pcfg)
    for case in cases:
        _atomic_case_save(case, ws_path(cfg, "data", "raw", case.case_id))
    ids = [c.case_id for c in cases]
    split = volumes.split_dataset(ids, cfg.get("seed"))
    manifest = {
        "ids": ids,
        "dataset_hash": phantom.dataset_hash(cases),
        "config": cfg["phantom"],
        "seed": cfg.get("seed"),
    }
    _atomic_write_text(ws_path(cfg, "data", "raw", "manifest.yaml"),
                       yaml.safe_dump(manifest, sort_keys=True))
    _atomic_write_text(ws_path(cfg, "data", "raw", "splits.json"), json.dumps({
        "train": split.train_ids, "val": split.val_ids, "test": split.test_ids,
        "seed": split.seed}, indent=2))
    outputs = [os.path.join("data", "raw", "manifest.yaml"),
               os.path.join("data", "raw", "splits.json")]
    outputs += [os.path.join("data", "raw", cid) for cid in ids]
    return outputs


def stage_inpaint_train(cfg):
    manifest = _manifest(cfg)
    splits = _splits(cfg)
    cases = _load_cases(cfg, "raw", splits["train"])
    n = cfg["ncg"]
    net = ncg.train_inpainter(
        cases,
        ncg.FfcInpainterConfig(n["base_channels"], n["n_ffc_blocks"],
                               n["global_branch_ratio"], n["downsample_stages"]),
        epochs=n["epochs"], seed=cfg.get("seed"),
        steps_per_epoch=n["steps_per_epoch"], batch_size=n["batch_size"], lr=n["lr"])
    os.makedirs(ws_path(cfg, "ckpt"), exist_ok=True)
    ncg.save_inpainter(net, ws_path(cfg, "ckpt", "inpainter.pt"))
    return [os.path.join("ckpt", "inpainter.pt")]


def stage_inpaint_apply(cfg):
    splits = _splits(cfg)
    net = ncg.load_inpainter(_require(cfg, os.path.join("ckpt", "inpainter.pt"), "inpaint-train"))
    lo, hi = cfg.get("volumes.window")
    outputs = []
    for cid in splits["train"] + splits["val"]:
        case = volumes.load_case(ws_path(cfg, "data", "raw", cid), cid)
        normal = ncg.generate_normal_case(net, volumes.preprocess_case(case, lo, hi))
        _atomic_case_save(normal, ws_path(cfg, "data", "normals", cid))
        outputs.append(os.path.join("data", "normals", cid))
    return outputs


def stage_mcs_train(cfg):
    splits = _splits(cfg)
    _require(cfg, os.path.join("data", "normals", splits["train"][0]), "inpaint-apply")
    reals = _load_cases(cfg, "raw", splits["train"])
    normals = _load_cases(cfg, "normals", splits["train"])
    ae, eps_net = mcs.train_mcs(reals, normals, _mcs_config(cfg), cfg.get("seed"))
    os.makedirs(ws_path(cfg, "ckpt"), exist_ok=True)
    mcs.save_autoencoder(ae, ws_path(cfg, "ckpt", "ae.pt"))
    mcs.save_denoiser(eps_net, ws_path(cfg, "ckpt", "denoiser.pt"))
    return [os.path.join("ckpt", "ae.pt"), os.path.join("ckpt", "denoiser.pt")]


def stage_synthesize(cfg):
    splits = _splits(cfg)
    ae = mcs.load_autoencoder(_require(cfg, os.path.join("ckpt", "ae.pt"), "mcs-train"))
    eps_net = mcs.load_denoiser(_require(cfg, os.path.join("ckpt", "denoiser.pt"), "mcs-train"))
    mcfg = _mcs_config(cfg)
    sched = mcs.make_schedule(mcfg.T, mcfg.beta_start, mcfg.beta_end)
    elastic = maskops.ElasticParams(alpha=cfg.get("maskops.elastic.alpha"),
                                    sigma=cfg.get("maskops.elastic.sigma"))
    axes_range = tuple(cfg.get("maskops.axes_range"))
    rng = np.random.default_rng(cfg.get("seed"))
    outputs = []
    for i in range(cfg.get("synthesize.n_cases")):
        cid = splits["train"][int(rng.integers(0, len(splits["train"])))]
        normal = volumes.load_case(
            _require(cfg, os.path.join("data", "normals", cid), "inpaint-apply"), cid)
        seed = int(rng.integers(0, 2**31 - 1))
        syn = mcs.synthesize_case(ae, eps_net, normal, sched, axes_range, elastic, seed)
        out_id = f"syn_{i:04d}"
        syn.case_id = out_id
        _atomic_case_save(syn, ws_path(cfg, "data", "synth", out_id))
        provenance = {
            "source_case": cid, "seed": seed, "T": mcfg.T,
            "beta_start": mcfg.beta_start, "beta_end": mcfg.beta_end,
            "mask_axes_range": list(axes_range),
            "elastic": {"alpha": elastic.alpha, "sigma": elastic.sigma},
        }
        _atomic_write_text(ws_path(cfg, "data", "synth", out_id, "provenance.yaml"),
                           yaml.safe_dump(provenance, sort_keys=True))
        outputs.append(os.path.join("data", "synth", out_id))
    return outputs


def stage_seg_train(cfg):
    splits = _splits(cfg)
    p_synth = cfg.get("ms.p_synth")
    reals = _load_cases(cfg, "raw", splits["train"])
    val_cases = _load_cases(cfg, "raw", splits["val"])
    m = cfg["ms"]
    if p_synth > 0:
        _require(cfg, os.path.join("data", "normals", splits["train"][0]), "inpaint-apply")
        normals = _load_cases(cfg, "normals", splits["train"])
        ae = mcs.load_autoencoder(_require(cfg, os.path.join("ckpt", "ae.pt"), "mcs-train"))
        eps_net = mcs.load_denoiser(_require(cfg, os.path.join("ckpt", "denoiser.pt"), "mcs-train"))
        mcfg = _mcs_config(cfg)
        sched = mcs.make_schedule(mcfg.T, mcfg.beta_start, mcfg.beta_end)
    else:
        normals, ae, eps_net, sched = [], None, None, None
    elastic = maskops.ElasticParams(alpha=cfg.get("maskops.elastic.alpha"),
                                    sigma=cfg.get("maskops.elastic.sigma"))
    stream = ms.hybrid_stream(
        reals, normals, ae, eps_net, sched, p_synth, cfg.get("seed"),
        patch=m["patch"], axes_range=tuple(cfg.get("maskops.axes_range")),
        elastic=elastic, window=tuple(cfg.get("volumes.window")))
    net = ms.UNet3D(m["base_channels"])
    tag = _seg_tag(cfg)
    os.makedirs(ws_path(cfg, "ckpt"), exist_ok=True)
    os.makedirs(ws_path(cfg, "logs"), exist_ok=True)
    ms.train_segmenter(
        stream, net, ms.SegLossConfig(m["loss"]["gamma"], m["loss"]["dice_smooth"]),
        steps=m["steps"], seed=cfg.get("seed"), batch_size=m["batch_size"], lr=m["lr"],
        epoch_steps=m["epoch_steps"], val_cases=val_cases, val_patch=m["patch"],
        ckpt_path=ws_path(cfg, "ckpt", f"seg_{tag}.pt"),
        log_path=ws_path(cfg, "logs", f"seg_{tag}.jsonl"))
    return [os.path.join("ckpt", f"seg_{tag}.pt"), os.path.join("logs", f"seg_{tag}.jsonl")]


def stage_infer(cfg):
    splits = _splits(cfg)
    tag = _seg_tag(cfg)
    net = ms.load_segmenter(_require(cfg, os.path.join("ckpt", f"seg_{tag}.pt"), "seg-train"))
    m = cfg["ms"]
    lo, hi = cfg.get("volumes.window")
    outputs = []
    os.makedirs(ws_path(cfg, "pred", tag), exist_ok=True)
    for cid in splits["test"]:
        case = volumes.load_case(ws_path(cfg, "data", "raw", cid), cid)
        pre = volumes.preprocess_case(case, lo, hi)
        pred = ms.infer_volume(net, pre, patch=(m["patch"],) * 3, overlap=m["overlap"])
        rel = os.path.join("pred", tag, f"{cid}.nii.gz")
        volumes.write_mask(pred, ws_path(cfg, rel), case.spacing)
        outputs.append(rel)
    return outputs


def stage_evaluate(cfg):
    splits = _splits(cfg)
    tag = _seg_tag(cfg)
    pairs = []
    for cid in splits["test"]:
        pred_path = _require(cfg, os.path.join("pred", tag, f"{cid}.nii.gz"), "infer")
        pred = volumes.load_mask(pred_path)
        gt = volumes.load_case(ws_path(cfg, "data", "raw", cid), cid).tumor_mask
        pairs.append((cid, pred, gt))
    report = evaluation.evaluate_cases(pairs)
    os.makedirs(ws_path(cfg, "reports"), exist_ok=True)
    _atomic_write_text(ws_path(cfg, "reports", f"metrics_{tag}.json"), report.to_json())
    _atomic_write_text(ws_path(cfg, "reports", f"metrics_{tag}.txt"), report.to_table(tag))
    return [os.path.join("reports", f"metrics_{tag}.json"),
            os.path.join("reports", f"metrics_{tag}.txt")]


_STAGE_FUNCS = {
    "phantom": stage_phantom,
    "inpaint-train": stage_inpaint_train,
    "inpaint-apply": stage_inpaint_apply,
    "mcs-train": stage_mcs_train,
    "synthesize": stage_synthesize,
    "seg-train": stage_seg_train,
    "infer": stage_infer,
    "evaluate": stage_evaluate,
}


def _stage_signature(cfg, stage):
    parts = [stage, cfg.get("seed")]
    if stage == "phantom":
        parts.append(cfg["phantom"])
    elif stage == "inpaint-train":
        parts += [cfg["ncg"], cfg["volumes"], _manifest(cfg)["dataset_hash"]]
    elif stage == "inpaint-apply":
        parts += [cfg["volumes"], _manifest(cfg)["dataset_hash"],
                  _file_digest(_require(cfg, os.path.join("ckpt", "inpainter.pt"), "inpaint-train"))]
    elif stage == "mcs-train":
        parts += [cfg["mcs"], _manifest(cfg)["dataset_hash"]]
    elif stage == "synthesize":
        parts += [cfg["synthesize"], cfg["maskops"],
                  _file_digest(_require(cfg, os.path.join("ckpt", "ae.pt"), "mcs-train")),
                  _file_digest(_require(cfg, os.path.join("ckpt", "denoiser.pt"), "mcs-train"))]
    elif stage == "seg-train":
        parts += [cfg["ms"], cfg["maskops"], _manifest(cfg)["dataset_hash"]]
        if cfg.get("ms.p_synth") > 0:
            parts += [_file_digest(_require(cfg, os.path.join("ckpt", "ae.pt"), "mcs-train")),
                      _file_digest(_require(cfg, os.path.join("ckpt", "denoiser.pt"), "mcs-train"))]
    elif stage == "infer":
        tag = _seg_tag(cfg)
        parts += [cfg["ms"],
                  _file_digest(_require(cfg, os.path.join("ckpt", f"seg_{tag}.pt"), "seg-train"))]
    elif stage == "evaluate":
        tag = _seg_tag(cfg)
        splits = _splits(cfg)
        parts += [[_file_digest(_require(cfg, os.path.join("pred", tag, f"{cid}.nii.gz"), "infer"))
                   for cid in splits["test"]]]
    return _signature(*parts)


def run_stage(stage, cfg, force=False):
    """Run one pipeline stage; skipped with 'up-to-date' when the completion
    record matches the current inputs. Returns a status string."""
    if stage not in _STAGE_FUNCS:
        raise PipelineError(f"unknown stage '{stage}' (choose from {STAGES})")
    signature = _stage_signature(cfg, stage)
    if not force and _up_to_date(cfg, stage, signature):
        print(f"[{stage}] up-to-date")
        return "up-to-date"
    print(f"[{stage}] running")
    outputs = _STAGE_FUNCS[stage](cfg)
    _write_record(cfg, stage, signature, outputs)
    print(f"[{stage}] completed ({len(outputs)} artifacts)")
    return "completed"


def run_all(cfg, force=False):
    stages = ["phantom", "inpaint-train", "inpaint-apply"]
    if cfg.get("ms.p_synth") > 0:
        stages += ["mcs-train", "synthesize"]
    stages += ["seg-train", "infer", "evaluate"]
    for stage in stages:
        run_stage(stage, cfg, force=force)


# --- reporting ---

def render_report(cfg):
    """Comparison table across all evaluation artifacts; best per column bolded."""
    reports_dir = ws_path(cfg, "reports")
    rows = []
    if os.path.isdir(reports_dir):
        for fname in sorted(os.listdir(reports_dir)):
            if fname.startswith("metrics_") and fname.endswith(".json"):
                tag = fname[len("metrics_"):-len(".json")]
                with open(os.path.join(reports_dir, fname)) as f:
                    report = evaluation.MetricsReport.from_dict(json.load(f))
                rows.append((tag, report.aggregate))
    if not rows:
        raise NoResultsError(f"no evaluation artifacts under {reports_dir}")
    best = [max(r[1][j] for r in rows) for j in range(4)]
    lines = [f"{'tag':<16}" + "".join(f"{n.upper():>12}" for n in evaluation.METRIC_NAMES)]
    for tag, agg in rows:
        cells = []
        for j, v in enumerate(agg):
            text = evaluation.format_percent(v)
            if len(rows) > 1 and v == best[j]:
                text = f"**{text}**"
            cells.append(f"{text:>12}")
        lines.append(f"{tag:<16}" + "".join(cells))
    return "\n".join(lines)


# --- entry point ---

VERBS = {
    "gen-phantom": "phantom",
    "train-inpainter": "inpaint-train",
    "make-normals": "inpaint-apply",
    "train-mcs": "mcs-train",
    "synthesize": "synthesize",
    "train-seg": "seg-train",
    "infer": "infer",
    "evaluate": "evaluate",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="mmtumor",
                                     description="Staged tumor synthesis/segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for verb in list(VERBS) + ["run-all", "report", "validate-config"]:
        p = sub.add_parser(verb)
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--profile", default=None, choices=["tiny", "desk"])
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workspace", default=None,
                       help="workspace root (or set MMTUMOR_WORKSPACE)")
        group = p.add_mutually_exclusive_group()
        group.add_argument("--resume", action="store_true", default=True,
                           help="skip stages whose inputs are unchanged (default)")
        group.add_argument("--force", action="store_true", default=False,
                           help="re-run even if up-to-date")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)  # determinism contract for pipeline runs
    try:
        if args.command == "validate-config":
            cfg = (validate_config(args.config) if args.config
                   else build_config(profile=args.profile, seed=args.seed,
                                     workspace=args.workspace))
            print(cfg.to_yaml())
            return EXIT_OK
        cfg = build_config(config_path=args.config, profile=args.profile,
                           seed=args.seed, workspace=args.workspace)
        with _lock(cfg):
            if args.command == "run-all":
                run_all(cfg, force=args.force)
            elif args.command == "report":
                print(render_report(cfg))
            else:
                run_stage(VERBS[args.command], cfg, force=args.force)
        return EXIT_OK
    except (ConfigInvalidError, ConfigParseError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
