"""Experiment defaults, initial guesses, surface profiles, run artifacts, CLI."""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from pstokes import cli, experiments, fem, meshing, solver
from pstokes.kernels import PowerLaw
from pstokes.meshing import BLOCK, ISMIP_B, DomainSpec


def tiny_config(tmp_path, kind=BLOCK, method=solver.NEWTON_EXACT, **solver_kw):
    domain = DomainSpec(kind, nx=4, ny=2, copies=0 if kind == BLOCK else 1)
    params = experiments.default_params(kind, delta=1e-6)
    cfg_solver = solver.SolverConfig(method=method, max_outer=30, tol_rel_ries=1e-9, **solver_kw)
    return experiments.ExperimentConfig(
        domain=domain,
        params=params,
        solver=cfg_solver,
        initial_guess_friction=kind == BLOCK,
        output_dir=tmp_path / "run",
        make_plots=True,
    )


class TestDefaults:
    def test_benchmark_constants(self):
        params = experiments.default_params(ISMIP_B)
        assert params.power_law_bulk.r == pytest.approx(4.0 / 3.0)
        assert params.power_law_bulk.delta == 1e-12
        assert params.power_law_bulk.half_factor
        assert not params.power_law_slide.half_factor
        assert params.mu0 == 1e-17
        assert params.B == pytest.approx(0.5 * (1e-16) ** (-1.0 / 3.0), rel=1e-14)
        assert params.B == pytest.approx(107721.7345, rel=1e-9)
        assert params.rho == 910.0

    def test_block_friction_variants(self):
        low = experiments.default_params(BLOCK)
        assert low.tau == 1e3
        assert low.power_law_slide.r == low.power_law_bulk.r  # s = p
        high = experiments.default_params(BLOCK, tau=1e7)
        assert high.tau == 1e7

    def test_ismip_bed_is_clamped(self):
        params = experiments.default_params(ISMIP_B)
        assert params.tau == 0.0
        mesh = meshing.build_mesh(experiments.default_domain(ISMIP_B, nx=4, ny=2))
        assert fem.MixedSpace(mesh).n_bed_edges == 0

    def test_gravity_rotation(self):
        alpha = np.radians(0.5)
        g = experiments.rotated_gravity(alpha)
        assert np.linalg.norm(g) == pytest.approx(9.81, rel=1e-14)
        assert g[0] > 0.0 > g[1]  # downslope +x, downward y
        assert g[0] == pytest.approx(9.81 * np.sin(alpha), rel=1e-14)

    def test_force_density_scale(self):
        params = experiments.default_params(ISMIP_B)
        assert params.rho * np.linalg.norm(params.g) == pytest.approx(8927.1, rel=1e-12)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            experiments.default_params("WEDGE")


class TestInitialGuess:
    def setup_method(self):
        mesh = meshing.build_mesh(DomainSpec(BLOCK, nx=4, ny=2))
        self.space = fem.MixedSpace(mesh)
        self.params = experiments.default_params(BLOCK, delta=1e-6)

    def test_discretely_divergence_free(self):
        # Taylor-Hood velocities are divergence-free against the pressure
        # space, not pointwise: check the discrete pairing (div v, psi_b).
        state = experiments.initial_guess(self.space, self.params, friction_term=True)
        space = self.space
        gv = fem._velocity_gradients(space, state.velocity)
        div = gv[..., 0, 0] + gv[..., 1, 1]
        pairing = np.zeros(space.n_pdofs)
        np.add.at(
            pairing,
            space.mesh.triangles.ravel(),
            np.einsum("eq,eq,qb->eb", space.qweights, div, space.p1_vals).ravel(),
        )
        scale = float(np.einsum("eq,eqij,eqij->", space.qweights, gv, gv)) ** 0.5
        assert np.linalg.norm(pairing) <= 1e-10 * max(scale * space.domain_area() ** 0.5, 1e-300)

    def test_zero_gravity_gives_zero(self):
        params = replace(self.params, g=np.zeros(2))
        state = experiments.initial_guess(self.space, params, friction_term=True)
        assert np.all(state.coefficients == 0.0)

    def test_friction_flag_matches_zero_tau(self):
        params0 = replace(self.params, tau=0.0)
        a = experiments.initial_guess(self.space, params0, friction_term=False)
        b = experiments.initial_guess(self.space, params0, friction_term=True)
        assert np.array_equal(a.coefficients, b.coefficients)

    def test_friction_term_changes_guess(self):
        a = experiments.initial_guess(self.space, self.params, friction_term=False)
        b = experiments.initial_guess(self.space, self.params, friction_term=True)
        assert not np.array_equal(a.coefficients, b.coefficients)


class TestSurfaceVelocity:
    def make(self, kind=BLOCK, copies=0):
        mesh = meshing.build_mesh(DomainSpec(kind, nx=4, ny=2, copies=copies))
        return fem.MixedSpace(mesh)

    def test_zero_state(self):
        space = self.make()
        profile = experiments.surface_velocity(space, space.zero_state(), np.radians(0.5))
        assert np.all(profile.v_r == 0.0)
        assert profile.n_invalid == 0

    def test_zero_angle_gives_speed_component(self):
        space = self.make()
        state = space.zero_state()
        u = state.velocity.reshape(-1, 2)
        u[:, 0] = -3.0
        u[:, 1] = 7.0  # must not contribute at alpha = 0
        profile = experiments.surface_velocity(space, state, 0.0)
        assert np.allclose(profile.v_r, 3.0)

    def test_paper_mode_flags_negative_radicand(self):
        space = self.make()
        state = space.zero_state()
        u = state.velocity.reshape(-1, 2)
        u[:, 1] = 1.0  # purely vertical motion: radicand < 0 in paper mode
        profile = experiments.surface_velocity(space, state, np.radians(0.5), experiments.SIGN_PAPER)
        assert profile.n_invalid == len(profile.x)
        assert np.all(np.isnan(profile.v_r))
        conv = experiments.surface_velocity(space, state, np.radians(0.5), experiments.SIGN_CONVENTIONAL)
        assert conv.n_invalid == 0

    def test_sign_modes_close_for_shallow_angles(self):
        rng = np.random.default_rng(50)
        space = self.make()
        state = space.zero_state()
        u = state.velocity.reshape(-1, 2)
        u[:, 0] = rng.uniform(1.0, 2.0, len(u))
        u[:, 1] = rng.uniform(-1.0, 1.0, len(u)) * u[:, 0]  # |v2| <= |v1|
        a = np.radians(0.5)
        p = experiments.surface_velocity(space, state, a, experiments.SIGN_PAPER)
        c = experiments.surface_velocity(space, state, a, experiments.SIGN_CONVENTIONAL)
        rel = np.abs(p.v_r - c.v_r) / c.v_r
        assert np.all(rel <= 2e-4)

    def test_central_copy_window(self):
        space = self.make(kind=ISMIP_B, copies=2)
        state = space.zero_state()
        profile = experiments.surface_velocity(space, state, 0.0)
        assert profile.x[0] == pytest.approx(0.0)
        assert profile.x[-1] == pytest.approx(5000.0)
        assert np.all(np.diff(profile.x) > 0.0)
        # P2 nodes on the surface of one copy: 2 * nx + 1
        assert len(profile.x) == 2 * 4 + 1

    def test_requires_free_surface(self):
        mesh = meshing.build_mesh(DomainSpec(BLOCK, nx=4, ny=2))
        mesh.boundary_tags = [meshing.DIRICHLET] * len(mesh.boundary_tags)
        space = fem.MixedSpace(mesh)
        with pytest.raises(ValueError):
            experiments.surface_velocity(space, space.zero_state(), 0.0)


class TestRunExperiment:
    def test_artifacts_and_schema(self, tmp_path):
        config = tiny_config(tmp_path)
        art = experiments.run_experiment(config)
        out = config.output_dir
        text = (out / "iterations.csv").read_text().splitlines()
        assert text[0] == "k,J,ries,ries_rel,alpha,n_merit_evals,wall_time"
        first = text[1].split(",")
        assert float(first[3]) == 1.0  # ries_rel[0] is 1 by construction
        surface = (out / "surface_velocity.csv").read_text().splitlines()
        assert surface[0] == "x,v_r"
        meta = json.loads((out / "run_meta.json").read_text())
        assert meta["status"] == art.result.status
        assert meta["mesh"]["n_triangles"] == 16
        assert (out / "convergence.png").stat().st_size > 0
        assert (out / "surface_velocity.png").stat().st_size > 0
        assert not (out / "failure.json").exists()

    def test_deterministic_rerun(self, tmp_path):
        cfg1 = tiny_config(tmp_path / "a")
        cfg2 = tiny_config(tmp_path / "b")
        experiments.run_experiment(cfg1)
        experiments.run_experiment(cfg2)

        def rows_without_walltime(path):
            lines = Path(path).read_text().splitlines()
            names = lines[0].split(",")
            drop = names.index("wall_time")
            return [tuple(v for i, v in enumerate(ln.split(",")) if i != drop) for ln in lines[1:]]

        assert rows_without_walltime(cfg1.output_dir / "iterations.csv") == rows_without_walltime(
            cfg2.output_dir / "iterations.csv"
        )
        assert (cfg1.output_dir / "surface_velocity.csv").read_text() == (
            cfg2.output_dir / "surface_velocity.csv"
        ).read_text()

    def test_failure_writes_marker(self, tmp_path):
        config = tiny_config(tmp_path)

        def broken(x, y):
            raise RuntimeError("no force field available")

        config.params = replace(config.params, body_force=broken)
        with pytest.raises(RuntimeError):
            experiments.run_experiment(config)
        marker = json.loads((config.output_dir / "failure.json").read_text())
        assert marker["stage"] == "initial_guess"
        assert "no force field" in marker["error"]


class TestGoldenRun:
    """Frozen numbers for the fixed tiny configuration (block, nx=4, ny=2,
    delta=1e-6, newton-exact).  Values are pinned to 1e-6 relative so the
    test survives last-bit arithmetic differences but catches semantic
    drift in assembly, search accounting, or the output schema."""

    GOLDEN = [
        # (k, J, ries_rel, alpha, n_merit_evals)
        (0, -193565.531348048, 1.0, 0.0, 0),
        (1, -10696947556.78235, 0.03677808859411089, 1728.1875, 25),
        (2, -11120760517.884071, 0.008174713477962307, 0.7651904821395874, 25),
        (7, -11147583475.278828, 5.714020641232467e-11, 0.9999736547470093, 25),
    ]
    SURFACE_MAX = 164.74564415835275

    def test_golden_history(self, tmp_path):
        config = tiny_config(tmp_path)
        art = experiments.run_experiment(config)
        assert art.result.converged
        by_k = {rec.k: rec for rec in art.result.history}
        for k, J, ries_rel, alpha, evals in self.GOLDEN:
            rec = by_k[k]
            assert rec.J == pytest.approx(J, rel=1e-6)
            assert rec.ries_rel == pytest.approx(ries_rel, rel=1e-6, abs=1e-16)
            assert rec.alpha == pytest.approx(alpha, rel=1e-6)
            assert rec.n_merit_evals == evals
        assert float(np.nanmax(art.profile.v_r)) == pytest.approx(self.SURFACE_MAX, rel=1e-6)


class TestDeltaSweep:
    def test_single_delta_reduces_to_run(self, tmp_path):
        config = tiny_config(tmp_path)
        arts = experiments.delta_sweep(config, [1e-6])
        assert len(arts) == 1 and arts[0] is not None
        single = tiny_config(tmp_path / "single")
        experiments.run_experiment(single)

        def body(path):
            lines = Path(path).read_text().splitlines()
            names = lines[0].split(",")
            drop = names.index("wall_time")
            return [tuple(v for i, v in enumerate(ln.split(",")) if i != drop) for ln in lines[1:]]

        assert body(config.output_dir / "delta_1e-06" / "iterations.csv") == body(
            single.output_dir / "iterations.csv"
        )
        combined = (config.output_dir / "combined_history.csv").read_text().splitlines()
        assert combined[0] == "delta,k,J,ries,ries_rel,alpha,n_merit_evals,wall_time"
        assert (config.output_dir / "sweep_convergence.png").exists()

    def test_rejects_nonpositive_delta(self, tmp_path):
        with pytest.raises(ValueError):
            experiments.delta_sweep(tiny_config(tmp_path), [1e-6, 0.0])


class TestRegularizationStudy:
    def test_reference_point_distance_zero(self, tmp_path):
        config = tiny_config(tmp_path, method=solver.NEWTON_EXACT)
        pairs = [(1e-2, 1e-4), (1e-3, 1e-6)]
        report = experiments.regularization_convergence_study(config, pairs, reference=(1e-3, 1e-6))
        ref_pt = [q for q in report["points"] if (q["delta"], q["mu0"]) == (1e-3, 1e-6)][0]
        assert ref_pt["distance2"] == 0.0
        assert (config.output_dir / "regularization_study.csv").exists()
        assert (config.output_dir / "regularization_study.json").exists()

    def test_bound_linear_in_mu0(self):
        b1 = experiments.regularization_bound(1e-3, 1e-5, 5e6, 5e3, 4 / 3, 4 / 3)
        b2 = experiments.regularization_bound(1e-3, 2e-5, 5e6, 5e3, 4 / 3, 4 / 3)
        assert b2 - b1 == pytest.approx(1e-5, rel=1e-12)


class TestScalingInvariant:
    def test_linear_problem_scales_with_gravity(self):
        # p = s = 2 and the solution map is linear: scaling g by 2 scales v by 2
        mesh = meshing.build_mesh(DomainSpec(BLOCK, nx=4, ny=2))
        space = fem.MixedSpace(mesh)
        base = experiments.default_params(BLOCK, delta=1e-6, p=2.0, s=2.0)
        v1 = experiments.initial_guess(space, base, friction_term=True)
        doubled = replace(base, g=2.0 * base.g)
        v2 = experiments.initial_guess(space, doubled, friction_term=True)
        assert np.allclose(v2.coefficients, 2.0 * v1.coefficients, rtol=1e-9, atol=1e-30)


class TestConfigFile:
    def test_load_and_cli_override(self, tmp_path):
        cfg_file = tmp_path / "exp.ini"
        cfg_file.write_text(
            "[domain]\nexperiment = block\nnx = 4\nny = 2\n"
            "[params]\ndelta = 1e-6\ntau = 1000\n"
            "[solver]\nmethod = picard\nmax_iters = 25\ntol = 1e-8\n"
            f"[output]\nout = {tmp_path / 'from_file'}\n"
        )
        loaded = experiments.load_config_file(cfg_file)
        assert loaded["method"] == "picard"
        rc = cli.main(["run", "--config", str(cfg_file), "--method", "newton-exact", "--no-plots"])
        assert rc == 0
        meta = json.loads((tmp_path / "from_file" / "run_meta.json").read_text())
        assert meta["solver"]["method"] == "newton-exact"  # CLI overrides the file
        assert meta["domain"]["nx"] == 4


class TestCli:
    def test_run_exit_zero_and_artifacts(self, tmp_path):
        out = tmp_path / "cli_run"
        rc = cli.main(
            [
                "run",
                "--experiment",
                "block",
                "--method",
                "picard",
                "--nx",
                "4",
                "--ny",
                "2",
                "--delta",
                "1e-6",
                "--max-iters",
                "25",
                "--tol",
                "1e-8",
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        for name in ("iterations.csv", "surface_velocity.csv", "run_meta.json", "convergence.png"):
            assert (out / name).exists()

    def test_sweep_delta(self, tmp_path):
        out = tmp_path / "cli_sweep"
        rc = cli.main(
            [
                "sweep-delta",
                "--experiment",
                "block",
                "--method",
                "newton-exact",
                "--nx",
                "4",
                "--ny",
                "2",
                "--max-iters",
                "25",
                "--deltas",
                "1e-4,1e-6",
                "--no-plots",
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        assert (out / "combined_history.csv").exists()
        assert (out / "delta_0.0001" / "iterations.csv").exists()

    def test_study_regularization(self, tmp_path):
        out = tmp_path / "cli_study"
        rc = cli.main(
            [
                "study-regularization",
                "--experiment",
                "block",
                "--method",
                "newton-exact",
                "--nx",
                "4",
                "--ny",
                "2",
                "--max-iters",
                "40",
                "--tol",
                "1e-9",
                "--deltas",
                "1e-2,1e-3",
                "--no-plots",
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        assert (out / "regularization_study.json").exists()

    def test_check_command(self, capsys):
        rc = cli.main(["check"])
        captured = capsys.readouterr()
        assert rc == 0
        assert "checks passed" in captured.out
        assert "FAIL" not in captured.out

    def test_bad_arguments_fail_cleanly(self, tmp_path, capsys):
        rc = cli.main(["run", "--experiment", "block", "--nx", "4", "--ny", "2", "--p", "3.0", "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "error" in capsys.readouterr().err
