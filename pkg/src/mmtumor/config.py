"""Pipeline configuration: defaults, profiles, YAML loading and validation."""

import copy
import os
from dataclasses import dataclass

import yaml

from .errors import ConfigInvalidError, ConfigParseError

DEFAULTS = {
    "workspace": "workspace",
    "seed": 7,
    "phantom": {
        "grid": [64, 64, 64],
        "n_cases": 16,
        "tumor_prob": 0.9,
        "misalign_voxels": 3.0,
        "tumor_axes_range": [3.0, 7.0],
    },
    "volumes": {
        "window": [-21.0, 189.0],
    },
    "maskops": {
        "axes_range": [3.0, 7.0],
        "elastic": {"alpha": 2.0, "sigma": 4.0},
    },
    "ncg": {
        "base_channels": 32,
        "n_ffc_blocks": 4,
        "global_branch_ratio": 0.5,
        "downsample_stages": 2,
        "epochs": 4,
        "steps_per_epoch": 40,
        "batch_size": 8,
        "lr": 1.0e-3,
    },
    "mcs": {
        "f": 4,
        "base_channels": 16,
        "codebook_size": 512,
        "embedding_dim": 4,
        "commitment_weight": 0.25,
        "T": 100,
        "beta_start": 1.0e-3,
        "beta_end": 0.2,
        "patch": 32,
        "denoiser_channels": 32,
        "ae_steps": 2000,
        "ldm_steps": 20000,
        "batch_size": 4,
        "ldm_batch_size": 8,
        "lr": 1.0e-3,
    },
    "ms": {
        "loss": {"gamma": 0.5, "dice_smooth": 1.0e-5},
        "p_synth": 0.5,
        "tag": None,
        "steps": 300,
        "batch_size": 2,
        "lr": 1.0e-3,
        "patch": 32,
        "overlap": 0.25,
        "base_channels": 16,
        "epoch_steps": 50,
    },
    "synthesize": {"n_cases": 2},
    "eval": {},
}

PROFILES = {
    "tiny": {
        "phantom": {"grid": [32, 32, 32], "n_cases": 10, "tumor_axes_range": [3.0, 5.0]},
        "maskops": {"axes_range": [3.0, 5.0]},
        "ncg": {"base_channels": 16, "n_ffc_blocks": 2, "epochs": 2, "steps_per_epoch": 10,
                "batch_size": 4},
        "mcs": {"base_channels": 8, "T": 25, "patch": 16, "denoiser_channels": 16,
                "ae_steps": 50, "ldm_steps": 50, "batch_size": 2, "ldm_batch_size": 2},
        "ms": {"steps": 40, "patch": 16, "base_channels": 8, "epoch_steps": 20},
        "synthesize": {"n_cases": 1},
    },
    "desk": {
        "phantom": {"grid": [64, 64, 64], "n_cases": 32},
        "ncg": {"base_channels": 16, "n_ffc_blocks": 3, "epochs": 4, "steps_per_epoch": 40},
        "ms": {"steps": 300},
    },
}


@dataclass
class PipelineConfig:
    data: dict

    def get(self, path, default=None):
        node = self.data
        for part in path.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def __getitem__(self, key):
        return self.data[key]

    def to_yaml(self):
        return yaml.safe_dump(self.data, sort_keys=True)


def deep_merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _known_paths(node, prefix=""):
    paths = set()
    for k, v in node.items():
        p = f"{prefix}{k}"
        paths.add(p)
        if isinstance(v, dict):
            paths |= _known_paths(v, p + ".")
    return paths


def _collect_unknown(node, prefix, known, problems):
    for k, v in node.items():
        p = f"{prefix}{k}"
        if p not in known:
            problems.append(f"{p} is not a recognized config field")
        elif isinstance(v, dict):
            _collect_unknown(v, p + ".", known, problems)


def _check(problems, cond, message):
    if not cond:
        problems.append(message)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate_config_data(data):
    """Merge user data over defaults and check every declared parameter range.

    Returns a PipelineConfig with defaults filled in; raises
    ConfigInvalidError listing every violation by field path.
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigParseError("top-level config must be a mapping")
    problems = []
    _collect_unknown(data, "", _known_paths(DEFAULTS), problems)
    merged = deep_merge(DEFAULTS, data)
    c = PipelineConfig(merged)

    grid = c.get("phantom.grid")
    _check(problems, isinstance(grid, list) and len(grid) == 3
           and all(isinstance(g, int) and g >= 32 for g in grid),
           "phantom.grid must be three integers >= 32")
    _check(problems, isinstance(c.get("phantom.n_cases"), int) and c.get("phantom.n_cases") >= 1,
           "phantom.n_cases must be a positive integer")
    tp = c.get("phantom.tumor_prob")
    _check(problems, _is_num(tp) and 0.0 <= tp <= 1.0, "phantom.tumor_prob must be in [0, 1]")
    _check(problems, _is_num(c.get("phantom.misalign_voxels")) and c.get("phantom.misalign_voxels") >= 0,
           "phantom.misalign_voxels must be >= 0")

    window = c.get("volumes.window")
    if not (isinstance(window, list) and len(window) == 2 and all(_is_num(w) for w in window)):
        problems.append("volumes.window must be [lo, hi]")
    else:
        _check(problems, window[0] < window[1], "volumes.window requires lo < hi")

    ar = c.get("maskops.axes_range")
    if not (isinstance(ar, list) and len(ar) == 2 and all(_is_num(a) for a in ar)):
        problems.append("maskops.axes_range must be [min, max]")
    else:
        _check(problems, 1.0 <= ar[0] <= ar[1], "maskops.axes_range requires 1 <= min <= max")
    _check(problems, _is_num(c.get("maskops.elastic.alpha")) and c.get("maskops.elastic.alpha") >= 0,
           "maskops.elastic.alpha must be >= 0")
    _check(problems, _is_num(c.get("maskops.elastic.sigma")) and c.get("maskops.elastic.sigma") > 0,
           "maskops.elastic.sigma must be > 0")

    for key in ("base_channels", "n_ffc_blocks", "downsample_stages", "epochs",
                "steps_per_epoch", "batch_size"):
        v = c.get(f"ncg.{key}")
        _check(problems, isinstance(v, int) and v >= 0 if key == "epochs" else isinstance(v, int) and v > 0,
               f"ncg.{key} must be a positive integer")
    ratio = c.get("ncg.global_branch_ratio")
    _check(problems, _is_num(ratio) and 0.0 < ratio < 1.0,
           "ncg.global_branch_ratio must lie in (0, 1)")

    f = c.get("mcs.f")
    _check(problems, isinstance(f, int) and f >= 2 and (f & (f - 1)) == 0,
           "mcs.f must be a power of two >= 2")
    _check(problems, isinstance(c.get("mcs.T"), int) and c.get("mcs.T") >= 1,
           "mcs.T must be an integer >= 1")
    bs, be = c.get("mcs.beta_start"), c.get("mcs.beta_end")
    _check(problems, _is_num(bs) and _is_num(be) and 0.0 < bs <= be < 1.0,
           "mcs.beta_start/beta_end must satisfy 0 < start <= end < 1")
    patch = c.get("mcs.patch")
    _check(problems, isinstance(patch, int) and isinstance(f, int) and f > 0 and patch % (2 * f) == 0,
           "mcs.patch must be divisible by 2*f")
    for key in ("codebook_size", "embedding_dim", "ae_steps", "ldm_steps", "batch_size",
                "ldm_batch_size"):
        v = c.get(f"mcs.{key}")
        _check(problems, isinstance(v, int) and v >= 0,
               f"mcs.{key} must be a non-negative integer")

    gamma = c.get("ms.loss.gamma")
    _check(problems, _is_num(gamma) and gamma >= 0, "ms.loss.gamma must be >= 0")
    _check(problems, _is_num(c.get("ms.loss.dice_smooth")) and c.get("ms.loss.dice_smooth") > 0,
           "ms.loss.dice_smooth must be > 0")
    ps = c.get("ms.p_synth")
    _check(problems, _is_num(ps) and 0.0 <= ps <= 1.0, "ms.p_synth must be in [0, 1]")
    ov = c.get("ms.overlap")
    _check(problems, _is_num(ov) and 0.0 <= ov <= 0.9, "ms.overlap must be in [0, 0.9]")
    _check(problems, isinstance(c.get("ms.steps"), int) and c.get("ms.steps") >= 0,
           "ms.steps must be a non-negative integer")
    msp = c.get("ms.patch")
    _check(problems, isinstance(msp, int) and msp % 4 == 0 and msp > 0,
           "ms.patch must be a positive multiple of 4")

    _check(problems, isinstance(c.get("seed"), int), "seed must be an integer")
    _check(problems, isinstance(c.get("synthesize.n_cases"), int) and c.get("synthesize.n_cases") >= 0,
           "synthesize.n_cases must be a non-negative integer")

    if problems:
        raise ConfigInvalidError(problems)
    return c


def validate_config(path):
    """Load a YAML config file; an empty file yields the pure defaults."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigParseError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigParseError(f"malformed YAML in {path}: {e}") from e
    return validate_config_data(data)


def build_config(config_path=None, profile=None, seed=None, workspace=None):
    """Layering: defaults < profile < config file < explicit flags."""
    layered = {}
    if profile:
        if profile not in PROFILES:
            raise ConfigParseError(f"unknown profile '{profile}' (choose from {sorted(PROFILES)})")
        layered = deep_merge(layered, PROFILES[profile])
    if config_path:
        try:
            with open(config_path) as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigParseError(f"cannot read config {config_path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigParseError(f"malformed YAML in {config_path}: {e}") from e
        if not isinstance(user, dict):
            raise ConfigParseError("top-level config must be a mapping")
        layered = deep_merge(layered, user)
    if seed is not None:
        layered["seed"] = int(seed)
    env_ws = os.environ.get("MMTUMOR_WORKSPACE")
    if workspace is not None:
        layered["workspace"] = workspace
    elif env_ws and "workspace" not in layered:
        layered["workspace"] = env_ws
    return validate_config_data(layered)
