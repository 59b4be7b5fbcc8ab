import json
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from tryonlab.config import RunConfig
from tryonlab.synthdata import build_dataset

settings.register_profile(
    "suite",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    print_blob=True,
)
settings.load_profile("suite")

# Verdict lines for the acceptance criteria, printed once at the end of the
# run so the pass/fail status of each numbered criterion is visible at a
# glance.  Tests append (number, name, passed, detail).
VERDICTS: list[tuple[int, str, bool, str]] = []


def record_verdict(number: int, name: str, passed: bool, detail: str) -> None:
    VERDICTS.append((number, name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(VERDICTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number} ({name}): {detail}")


def tiny_config() -> RunConfig:
    """Small-but-structurally-complete configuration for fast tests."""
    return RunConfig(
        resolution=(32, 32),
        n_train=6,
        n_test=3,
        pyramid_levels=3,
        groups=4,
        encoder_widths=(12, 16, 20),
        phi_width=8,
        estimator_stem_width=16,
        group_width=4,
        vanilla_width=8,
        warp_batch=2,
        warp_steps=3,
        ae_batch=2,
        ae_steps=3,
        diff_batch=2,
        diff_steps=3,
        unet_widths=(16, 24, 24),
        d_q=32,
        val_every=2,
        log_every=1,
        val_samples=2,
    ).validate()


@pytest.fixture(scope="session")
def tiny_cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_cfg) -> Path:
    out = tmp_path_factory.mktemp("data") / "tiny"
    build_dataset(tiny_cfg.n_train, tiny_cfg.n_test, tiny_cfg.seed, out,
                  resolution=tiny_cfg.resolution)
    return out


@pytest.fixture(scope="session")
def default_cfg() -> RunConfig:
    return RunConfig().validate()


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


# ---------------------------------------------------------------------------
# Trained-at-full-scale artifacts.  The heavyweight acceptance criteria
# (ablation direction, differential-path direction, memorization) need real
# training runs; those are produced on demand into artifacts/acceptance and
# reused across pytest invocations, keyed by the default config.
# ---------------------------------------------------------------------------

ACCEPTANCE_DIR = Path(__file__).resolve().parent.parent / "artifacts" / "acceptance"


def _config_key(cfg: RunConfig) -> str:
    import hashlib

    return hashlib.sha256(
        json.dumps(cfg.to_dict(), sort_keys=True).encode()
    ).hexdigest()[:16]


@pytest.fixture(scope="session")
def acceptance_root(default_cfg) -> Path:
    root = ACCEPTANCE_DIR / _config_key(default_cfg)
    root.mkdir(parents=True, exist_ok=True)
    return root


@pytest.fixture(scope="session")
def full_dataset(acceptance_root, default_cfg) -> Path:
    out = acceptance_root / "data"
    if not (out / "manifest.jsonl").exists():
        build_dataset(default_cfg.n_train, default_cfg.n_test, default_cfg.seed,
                      out, resolution=default_cfg.resolution)
    return out
