"""On-disk formats: model artifacts (JSON), run/scan/table CSVs and the domain overlay SVG."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .lifting import SCHEMA_VERSION, LiftedModel
from .lincontrol import ConstraintSpec, InvariantSet
from .mpc import ClosedLoopRun, FeasibleDomainScan, MpcSpec

FLOAT_FMT = "{:.12g}"


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT.format(float(v))
    return str(v)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config_dict: dict) -> str:
    return hashlib.sha256(canonical_json(config_dict).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# model artifact


@dataclass
class ModelArtifact:
    """A fitted lifted model with its MPC ingredients.

    ``terminal_set`` is None when the invariant-set computation failed; the
    reason is kept in ``error`` so downstream scans can report an empty domain.
    """

    tag: str
    model: LiftedModel
    constraints: ConstraintSpec
    horizon: int
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray | None
    K: np.ndarray | None
    terminal_set: InvariantSet | None
    seed: int
    config_hash: str
    info: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def usable(self) -> bool:
        return self.error is None and self.P is not None and self.terminal_set is not None

    def spec(self) -> MpcSpec:
        if not self.usable:
            raise ValueError(f"artifact {self.tag!r} has no MPC ingredients: {self.error}")
        return MpcSpec(self.model, self.horizon, self.Q, self.R, self.P, self.terminal_set, self.constraints, self.K)

    def to_dict(self) -> dict:
        arr = lambda a: None if a is None else np.asarray(a).tolist()  # noqa: E731
        return {
            "schema_version": SCHEMA_VERSION,
            "tag": self.tag,
            "model": self.model.to_dict(),
            "constraints": self.constraints.to_dict(),
            "horizon": self.horizon,
            "Q": arr(self.Q),
            "R": arr(self.R),
            "P": arr(self.P),
            "K": arr(self.K),
            "terminal_set": None if self.terminal_set is None else self.terminal_set.to_dict(),
            "seed": self.seed,
            "config_hash": self.config_hash,
            "info": self.info,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArtifact":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported artifact schema version {d.get('schema_version')!r}")
        opt = lambda a: None if a is None else np.array(a, dtype=float)  # noqa: E731
        return cls(
            tag=d["tag"],
            model=LiftedModel.from_dict(d["model"]),
            constraints=ConstraintSpec.from_dict(d["constraints"]),
            horizon=int(d["horizon"]),
            Q=np.array(d["Q"], dtype=float),
            R=np.array(d["R"], dtype=float),
            P=opt(d["P"]),
            K=opt(d["K"]),
            terminal_set=None if d["terminal_set"] is None else InvariantSet.from_dict(d["terminal_set"]),
            seed=int(d["seed"]),
            config_hash=d["config_hash"],
            info=d.get("info", {}),
            error=d.get("error"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ModelArtifact":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# CSV


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_sidecar(path, **meta) -> None:
    Path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def run_rows(run: ClosedLoopRun):
    """One row per time step: t, states, applied input (blank if none), QP status."""
    n = run.states.shape[1]
    m = run.inputs.shape[1]
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)] + ["status"]
    rows = []
    for t, x in enumerate(run.states):
        if t < len(run.inputs):
            u = list(run.inputs[t])
        elif run.final_input is not None:
            u = list(run.final_input)
        else:
            u = [None] * m
        rows.append([t, *x, *u, run.statuses[t]])
    return header, rows


def write_run_csv(path, run: ClosedLoopRun) -> None:
    write_csv(path, *run_rows(run))


def write_scan_csv(path, scan: FeasibleDomainScan) -> None:
    c1, c2 = scan.grid.coords()
    rows = []
    for i, a in enumerate(c1):
        for j, b in enumerate(c2):
            st = "" if scan.statuses is None else scan.statuses[i, j]
            rows.append([i, j, a, b, bool(scan.mask[i, j]), st])
    write_csv(path, ["i", "j", "x1", "x2", "feasible", "status"], rows)


# ---------------------------------------------------------------------------
# SVG

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def overlay_svg(scans: list[FeasibleDomainScan], size: int = 480, margin: int = 50) -> str:
    """Feasible cells of each scan drawn as translucent rectangles with a legend."""
    if not scans:
        raise ValueError("no scans to draw")
    (lo1, hi1, n1), (lo2, hi2, n2) = scans[0].grid.axes
    for s in scans[1:]:
        if s.grid != scans[0].grid:
            raise ValueError("overlay requires identical grids")
    w1 = (hi1 - lo1) / max(n1 - 1, 1)
    w2 = (hi2 - lo2) / max(n2 - 1, 1)
    sx = size / ((hi1 - lo1) + w1)
    sy = size / ((hi2 - lo2) + w2)
    legend_h = 20 * len(scans)
    W, H = size + 2 * margin, size + 2 * margin + legend_h

    def px(a):
        return margin + (a - lo1 + w1 / 2) * sx

    def py(b):
        return margin + size - (b - lo2 + w2 / 2) * sy

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="{margin}" y="{margin}" width="{size}" height="{size}" fill="white" stroke="black"/>',
    ]
    c1, c2 = scans[0].grid.coords()
    cw, ch = w1 * sx, w2 * sy
    for k, scan in enumerate(scans):
        color = PALETTE[k % len(PALETTE)]
        out.append(f'<g fill="{color}" fill-opacity="0.45" stroke="none">')
        for i, j in zip(*np.nonzero(scan.mask)):
            x0 = px(c1[i]) - cw / 2
            y0 = py(c2[j]) - ch / 2
            out.append(f'<rect x="{x0:.3f}" y="{y0:.3f}" width="{cw:.3f}" height="{ch:.3f}"/>')
        out.append("</g>")
    out.append(f'<text x="{margin + size / 2}" y="{margin + size + 30}" text-anchor="middle" font-size="14">x1</text>')
    out.append(f'<text x="{margin - 30}" y="{margin + size / 2}" text-anchor="middle" font-size="14">x2</text>')
    for val, x in ((lo1, px(lo1)), (hi1, px(hi1))):
        out.append(f'<text x="{x:.1f}" y="{margin + size + 15}" text-anchor="middle" font-size="10">{val:g}</text>')
    for val, y in ((lo2, py(lo2)), (hi2, py(hi2))):
        out.append(f'<text x="{margin - 5}" y="{y:.1f}" text-anchor="end" font-size="10">{val:g}</text>')
    for k, scan in enumerate(scans):
        y = margin + size + 45 + 20 * k
        color = PALETTE[k % len(PALETTE)]
        out.append(f'<rect x="{margin}" y="{y - 10}" width="12" height="12" fill="{color}" fill-opacity="0.6"/>')
        label = escape(f"{scan.model_tag} ({scan.count} cells)")
        out.append(f'<text x="{margin + 18}" y="{y}" font-size="12">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
