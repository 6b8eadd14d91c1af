"""Shared fixtures.

The expensive piece is the `chain` fixture: one full CLI run of
gen-world -> gen-data -> four train runs -> edit -> eval into a session
temp directory, with per-stage wall times recorded. Everything that
needs trained weights (the acceptance suite, mostly) shares it.

Acceptance tests report one PASS/FAIL line per numbered criterion via
the `criterion_report` fixture; the lines are echoed in the terminal
summary so a plain `pytest` run shows the scorecard.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from embedit.checkpoint import load_bundle
from embedit.cli import main as cli_main
from embedit.dataset import load_corpus
from embedit.world import load_world, make_world


@dataclass
class ChainArtifacts:
    root: Path
    world_path: Path
    data_dir: Path
    checkpoints: dict[str, Path]   # "prior" / "diffusion" / "lm-stage1" / "lm-stage2"
    edit_dir: Path
    eval_lines: list[str]
    stage_seconds: dict[str, float]

    @property
    def final_checkpoint(self) -> Path:
        return self.checkpoints["lm-stage2"]


def _run(argv: list[str]) -> None:
    rc = cli_main(argv)
    assert rc == 0, f"cli {argv[0]} exited {rc}"


@pytest.fixture(scope="session")
def chain(tmp_path_factory) -> ChainArtifacts:
    """Full smoke chain through the public CLI, timed per stage."""
    root = tmp_path_factory.mktemp("chain")
    world_path = root / "world.bin"
    data_dir = root / "data"
    stage_seconds: dict[str, float] = {}

    def timed(tag: str, argv: list[str]) -> None:
        t0 = time.perf_counter()
        _run(argv)
        stage_seconds[tag] = time.perf_counter() - t0

    timed("gen-world", ["gen-world", "--seed", "0", "--out", str(world_path)])
    timed("gen-data", [
        "gen-data", "--world", str(world_path), "--seed", "0",
        "--pretrain", "5000", "--finetune", "500", "--heldout", "500",
        "--out-dir", str(data_dir),
    ])

    pretrain = data_dir / "pretrain.jsonl"
    checkpoints = {
        "prior": root / "ck1.bin",
        "diffusion": root / "ck2.bin",
        "lm-stage1": root / "ck3.bin",
        "lm-stage2": root / "ck4.bin",
    }
    prev: Path | None = None
    for target, out in checkpoints.items():
        argv = ["train", "--target", target, "--world", str(world_path),
                "--corpus", str(pretrain), "--out", str(out)]
        if prev is not None:
            argv += ["--in", str(prev)]
        timed(target, argv)
        prev = out

    edit_dir = root / "edit"
    world = load_world(world_path)
    inputs = [
        {"concepts": [["cat", 1.0]], "modality": "audio", "style": 0.0, "quality": 6.0},
        {"concepts": [["dog", 1.0]], "modality": "image", "style": 0.2, "quality": 7.0},
    ]
    inputs_path = root / "inputs.json"
    inputs_path.write_text(json.dumps(inputs))
    timed("edit", [
        "edit", "--world", str(world_path), "--checkpoint", str(prev),
        "--instruction", "add [audio] to [image]", "--inputs", str(inputs_path),
        "--out-dir", str(edit_dir),
    ])

    heldout = load_corpus(data_dir / "heldout.jsonl")
    eval_subset = [r for r in heldout
                   if len(r.edit_kinds) == 1
                   and r.edit_kinds[0] in ("add", "remove", "replace")][:100]
    eval_path = data_dir / "eval.jsonl"
    from embedit.dataset import write_corpus
    write_corpus(eval_subset, str(eval_path))

    t0 = time.perf_counter()
    rc = cli_main(["eval", "--world", str(world_path), "--checkpoint", str(prev),
                   "--corpus", str(eval_path)])
    stage_seconds["eval"] = time.perf_counter() - t0
    assert rc == 0

    return ChainArtifacts(
        root=root,
        world_path=world_path,
        data_dir=data_dir,
        checkpoints=checkpoints,
        edit_dir=edit_dir,
        eval_lines=[],
        stage_seconds=stage_seconds,
    )


@pytest.fixture(scope="session")
def trained_bundle(chain):
    return load_bundle(chain.final_checkpoint)


@pytest.fixture(scope="session")
def heldout_records(chain):
    return load_corpus(chain.data_dir / "heldout.jsonl")


@pytest.fixture(scope="session")
def world():
    """Session default world; identical to the chain's (seed 0)."""
    return make_world(seed=0)


# --------------------------------------------------------------------------
# acceptance scorecard plumbing

def pytest_configure(config):
    config._criterion_lines = []


@pytest.fixture
def criterion_report(request):
    """Callable: criterion_report(number, passed, detail). Records one
    scorecard line and fails the test when passed is False."""
    lines = request.config._criterion_lines

    def _report(number: int, passed: bool, detail: str) -> None:
        verdict = "PASS" if passed else "FAIL"
        lines.append(f"criterion {number}: {verdict} - {detail}")
        assert passed, f"criterion {number}: {detail}"

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)
