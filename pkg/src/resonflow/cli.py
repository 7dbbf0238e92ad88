"""Command line driver: ``resonflow flow|oracle|fgr|sweep --config run.toml --out DIR``.

One TOML file describes one run.  Outputs are written only after the config
validated; every CSV row and JSON document carries the sha256 of the
canonical config.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Literal

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .atommodel import AtomSpec, ProblemParams, domain_check
from .fockspace import build_basis, build_grid
from .kernels import write_family
from .oracle import ground_state_energy, perturbation_fit, resonance_by_dilation
from .resonance import fgr_condition, grid_directions, zd_zod
from .rgflow import FlowOptions, FlowRecord, ScaleSchedule, nondegeneracy_check, run_flow

log = logging.getLogger("resonflow")

EXIT_OK, EXIT_RUN, EXIT_CONFIG = 0, 1, 2

_PAULI = {
    "sigma_x": [[0, 1], [1, 0]],
    "sigma_z": [[1, 0], [0, -1]],
    "zero": [[0, 0], [0, 0]],
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AtomConfig(_Strict):
    energies: list[float] = [0.0, 1.0]
    coupling: Literal["sigma_x", "sigma_z", "zero"] | None = "sigma_x"
    dipoles_re: list[list[list[float]]] | None = None
    dipoles_im: list[list[list[float]]] | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if self.dipoles_re is not None:
            self.coupling = None
        elif self.coupling is None:
            raise ValueError("give either coupling or dipoles_re")
        elif len(self.energies) != 2:
            raise ValueError("named couplings are two-level; give dipoles_re for other atoms")
        return self

    def build(self) -> AtomSpec:
        if self.coupling is not None:
            d = np.array(_PAULI[self.coupling], complex)
            return AtomSpec(np.array(self.energies), np.stack([d, d, d]))
        d = np.array(self.dipoles_re, float)
        if self.dipoles_im is not None:
            d = d + 1j * np.array(self.dipoles_im, float)
        return AtomSpec(np.array(self.energies), d.astype(complex))


class GridConfig(_Strict):
    n_r: int = Field(24, ge=1)
    n_dir: Literal[6, 14, 26] = 6
    k_max: float = Field(4.5, gt=0)
    uv_sigma: float = Field(1.0, gt=0)
    uv_panels: int = Field(3, ge=1)
    ir_shells: int = Field(6, ge=0)


class TruncationConfig(_Strict):
    n_max: int = Field(2, ge=0)
    e_max: float | None = None
    e_max_multi: float | None = 0.22
    m_max: int | None = 2
    l_max: int | None = 4  # 0 selects exact solves

    @model_validator(mode="after")
    def _check(self):
        if self.l_max is not None and self.l_max == 1:
            raise ValueError("l_max must be 0 (exact) or >= 2")
        return self


class ParamsConfig(_Strict):
    lambda0: float = Field(3e-3, ge=0)
    vartheta: float = Field(math.pi / 8, ge=0, lt=math.pi / 4)
    p: list[float] | None = None
    p_im: list[float] = [0.0, 0.0, 0.0]
    p_star: list[float] = [0.0, 0.0, 0.5]
    rho0: float | None = None
    eps: float = Field(0.5, gt=0, lt=1)
    i0: int | None = Field(None, ge=1)


class ToleranceConfig(_Strict):
    tol_z: float | None = None
    j_max: int = Field(12, ge=0)
    min_steps: int = Field(0, ge=0)


class OracleConfig(_Strict):
    varthetas: list[float] | None = None
    k: int = Field(8, ge=1)


class SweepConfig(_Strict):
    kind: Literal["dispersion", "lambda", "theta"] = "dispersion"
    p_norms: list[float] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
    direction: list[float] = [0.0, 0.0, 1.0]
    lambdas: list[float] = [1e-3, 3e-3, 1e-2]
    varthetas: list[float] = [0.3, 0.4, 0.5]


class OutputConfig(_Strict):
    keep_kernels: bool = True


class RunConfig(_Strict):
    seed: int = 0
    atom: AtomConfig = AtomConfig()
    grid: GridConfig = GridConfig()
    truncation: TruncationConfig = TruncationConfig()
    params: ParamsConfig = ParamsConfig()
    tolerances: ToleranceConfig = ToleranceConfig()
    oracle: OracleConfig = OracleConfig()
    sweep: SweepConfig = SweepConfig()
    output: OutputConfig = OutputConfig()

    @model_validator(mode="after")
    def _preconditions(self):
        atom = self.atom.build()
        params = self.problem_params(atom)
        if params.i0 > atom.N:
            raise ValueError(f"i0={params.i0} exceeds the number of levels {atom.N}")
        if atom.N > 1 and atom.delta0 <= 0:
            raise ValueError("degenerate atomic levels (delta0 = 0)")
        dc = domain_check(params, atom, self.grid.uv_sigma)
        if not dc["in_domain"] and params.vartheta > 0:
            raise ValueError(f"parameters outside the analyticity domain: {dc}")
        return self

    def problem_params(self, atom: AtomSpec, **override) -> ProblemParams:
        pc = self.params
        p_star = np.array(pc.p_star, float)
        p = p_star if pc.p is None else np.array(pc.p, float)
        p = p + 1j * np.array(pc.p_im, float)
        rho0 = pc.rho0 if pc.rho0 is not None else 0.5 * min(1.0, atom.delta0)
        kw = dict(lambda0=pc.lambda0, theta=1j * pc.vartheta, p=p, p_star=p_star, rho0=rho0, eps=pc.eps,
                  i0=pc.i0 if pc.i0 is not None else atom.N)
        kw.update(override)
        return ProblemParams(**kw)


def config_hash(cfg: RunConfig) -> str:
    text = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return RunConfig.model_validate(data)


def build_problem(cfg: RunConfig, **override):
    """(grid, basis, atom, params) of a config; the radial grid gets one shell per schedule scale."""
    atom = cfg.atom.build()
    params = cfg.problem_params(atom, **override)
    g = cfg.grid
    sch = ScaleSchedule.from_params(params)
    ir = [sch.rho(j) for j in range(g.ir_shells)] or None
    grid = build_grid(g.n_r, g.n_dir, g.k_max, g.uv_sigma, ir_scales=ir, uv_panels=g.uv_panels)
    t = cfg.truncation
    basis = build_basis(grid, t.n_max, t.e_max if t.e_max is not None else g.k_max, t.e_max_multi)
    return grid, basis, atom, params


def flow_options(cfg: RunConfig, keep_families: bool = False) -> FlowOptions:
    t, tol = cfg.truncation, cfg.tolerances
    return FlowOptions(l_max=None if t.l_max == 0 else t.l_max, m_max=t.m_max, j_max=tol.j_max,
                       min_steps=tol.min_steps, tol_z=tol.tol_z, keep_families=keep_families)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("RESONFLOW_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    """Apply fn over items on a bounded pool; results come back in input order."""
    items = list(items)
    with ThreadPoolExecutor(max_workers=min(_workers(), max(1, len(items)))) as ex:
        return list(ex.map(fn, items))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    path.write_text(buf.getvalue())


def _p_fields(p) -> list[float]:
    p = np.asarray(p, complex)
    return [float(x) for x in p.real] + [float(x) for x in p.imag]


P_HEADER = ["p_x", "p_y", "p_z", "p_im_x", "p_im_y", "p_im_z"]


# -- commands ----------------------------------------------------------------


def cmd_flow(cfg: RunConfig, out: Path, resume: Path | None = None, from_step: int | None = None) -> int:
    h = config_hash(cfg)
    grid, basis, atom, params = build_problem(cfg)
    prev = None
    if resume is not None:
        prev = FlowRecord.from_dict(json.loads(Path(resume).read_text()), upto=from_step)
    keep = cfg.output.keep_kernels
    rec = run_flow(grid, basis, atom, params, flow_options(cfg, keep), resume=prev)
    doc = rec.to_dict()
    doc["config_hash"] = h
    doc["E_i0"] = float(atom.energies[params.i0 - 1])
    doc["lambda0"] = params.lambda0
    doc["vartheta"] = params.vartheta
    if rec.status == "converged":
        doc["nondegeneracy"] = nondegeneracy_check(grid, basis, atom, params, rec)
        doc["nondegeneracy"]["nearest"] = [{"re": complex(v).real, "im": complex(v).imag}
                                           for v in doc["nondegeneracy"].get("nearest", [])]
    out.mkdir(parents=True, exist_ok=True)
    if keep and rec.families:
        kdir = out / "kernels"
        kdir.mkdir(exist_ok=True)
        for j, fam in sorted(rec.families.items()):
            write_family(kdir / f"{j}.bin", fam)
    _write_json(out / "flow.json", doc)
    if rec.status != "converged":
        print(json.dumps({"error": "flow", "detail": rec.error, "config_hash": h}), file=sys.stderr)
        return EXIT_RUN
    z = rec.z_inf
    print(f"z_inf = {z.real:.15g} {z.imag:+.15g}i  enclosure {rec.enclosure:.3e}  steps {len(rec.steps)}")
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, out: Path) -> int:
    h = config_hash(cfg)
    grid, basis, atom, params = build_problem(cfg)
    rows = []
    doc = {"config_hash": h}
    if params.i0 == 1 and cfg.oracle.varthetas is None:
        gs = ground_state_energy(grid, basis, atom, params.with_(p=params.p.real))
        rows.append([gs["E"], 0.0, 0.0, params.lambda0, *_p_fields(params.p.real), 1.0, 0.0, h])
        doc.update(gs)
    else:
        try:
            r = resonance_by_dilation(grid, basis, atom, params, cfg.oracle.varthetas, cfg.oracle.k)
        except RuntimeError as exc:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "oracle.json", {"config_hash": h, "error": str(exc)})
            print(json.dumps({"error": "oracle", "detail": str(exc), "config_hash": h}), file=sys.stderr)
            return EXIT_RUN
        deriv = r.derivative if len(r.derivative) else np.zeros(len(r.values))
        for vt, z, ov, d in zip(r.varthetas, r.values, r.overlaps, deriv):
            rows.append([z.real, z.imag, vt, params.lambda0, *_p_fields(params.p), ov, d, h])
        doc.update({"z_res": {"re": r.z_res.real, "im": r.z_res.imag}, "noise": r.noise,
                    "plateau_vartheta": float(r.varthetas[r.plateau_index])})
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "spectrum.csv", ["re", "im", "vartheta", "lambda0", *P_HEADER, "overlap", "dz_dvartheta",
                                      "config_hash"], rows)
    _write_json(out / "oracle.json", doc)
    for r in rows:
        print(f"vartheta={r[2]:.4f}  z={r[0]:.12g} {r[1]:+.6e}i  overlap={r[9]:.4f}  |dz/dvartheta|={r[10]:.3e}")
    return EXIT_OK


def cmd_fgr(cfg: RunConfig, out: Path) -> int:
    h = config_hash(cfg)
    grid, basis, atom, params = build_problem(cfg)
    shift = zd_zod(grid, atom, params)
    if params.i0 >= 2:
        value, holds = fgr_condition(atom, params, *grid_directions(grid), sigma=grid.uv_sigma)
    else:
        value, holds = 0.0, False
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "shifts.csv", ["z_d_re", "z_d_im", "z_od_re", "z_od_im", "im_zod_residue", "fgr_value",
                                    "fgr_holds", "lambda0", "vartheta", *P_HEADER, "config_hash"],
               [[shift.z_d.real, shift.z_d.imag, shift.z_od.real, shift.z_od.imag, shift.im_zod_residue, value,
                 int(holds), params.lambda0, params.vartheta, *_p_fields(params.p), h]])
    if holds:
        print(f"FGR holds: value {value:.6e}, predicted width {2 * params.lambda0 ** 2 * shift.im_zod_residue:.6e}")
    else:
        print("FGR fails, no width predicted")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    h = config_hash(cfg)
    sw = cfg.sweep
    header = ["re", "im", "vartheta", "lambda0", *P_HEADER, "gap_or_enclosure", "status", "config_hash"]
    if sw.kind == "dispersion":
        u = np.asarray(sw.direction, float)
        u = u / np.linalg.norm(u)

        def point(pn):
            grid, basis, atom, params = build_problem(cfg, p=pn * u + 0j, theta=0.0)
            gs = ground_state_energy(grid, basis, atom, params)
            return [gs["E"], 0.0, 0.0, params.lambda0, *_p_fields(params.p), gs["gap"],
                    "simple" if gs["nondegenerate"] else "degenerate", h]

        rows = _map(point, sw.p_norms)
    elif sw.kind == "theta":
        def point(vt):
            grid, basis, atom, params = build_problem(cfg, theta=1j * vt)
            rec = run_flow(grid, basis, atom, params, flow_options(cfg), reconstruct=False)
            z = rec.z_inf if rec.z_inf is not None else complex("nan")
            return [z.real, z.imag, vt, params.lambda0, *_p_fields(params.p),
                    rec.enclosure if rec.enclosure is not None else float("nan"), rec.status, h]

        rows = _map(point, sw.varthetas)
    else:
        grid, basis, atom, params = build_problem(cfg)
        shift = zd_zod(grid, atom, params)
        fit = perturbation_fit(grid, basis, atom, params, sw.lambdas, a_ref=-(shift.z_d + shift.z_od))
        rows = [[z.real, z.imag, params.vartheta, lam, *_p_fields(params.p), res, "oracle", h]
                for lam, z, res in zip(fit.lambdas, fit.z, fit.residuals)]
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "fit.json", {"config_hash": h, "a_fit": {"re": fit.a_fit.real, "im": fit.a_fit.imag},
                                       "a_ref": {"re": fit.a_ref.real, "im": fit.a_ref.imag},
                                       "rel_error": fit.rel_error, "residual_exponent": fit.residual_exponent})
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "spectrum.csv", header, rows)
    for r in rows:
        print(" ".join(str(x) for x in r[:-1]))
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="resonflow", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=["flow", "oracle", "fgr", "sweep"])
    ap.add_argument("--config", required=True, type=Path)
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--resume", type=Path, default=None, help="flow.json of an earlier run to continue")
    ap.add_argument("--from-step", type=int, default=None, help="with --resume: keep only steps j < FROM_STEP")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
    except (OSError, tomllib.TOMLDecodeError, ValidationError, ValueError) as exc:
        print(json.dumps({"error": "config", "detail": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    np.random.seed(cfg.seed)
    if args.command == "flow":
        return cmd_flow(cfg, args.out, args.resume, args.from_step)
    if args.command == "oracle":
        return cmd_oracle(cfg, args.out)
    if args.command == "fgr":
        return cmd_fgr(cfg, args.out)
    return cmd_sweep(cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())
