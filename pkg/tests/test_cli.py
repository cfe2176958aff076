import math
import os
import re

import numpy as np
import pytest
import toml

from jfom import io
from jfom.certificates import Certificate, FeatureBasis, certified_lower_bound, estimate_feasibility
from jfom.cli import EXIT_OK, EXIT_VALIDATION, build_parser, localize_difference, main
from jfom.config import load_config
from jfom.problems import RiccatiOracle

SMALL_RUN = '''
[problem]
state_radius = 2.0

[basis]
kind = "tensor"
time_degree = 2
state_degree = 2

[rollout]
knots = 4
step = 0.05

[search]
population = 8
iterations = 3
elite_fraction = 0.25
probe_degree = 1

[dual]
iterations = 50
max_rounds = 2
alternations = 1

[sampling]
n_points = 16
n_refill = 0
control_grid = 5
n_terminal = 8
'''

LQR_RUN = '''
[problem]
state_radius = 2.0

[basis]
kind = "tensor"
time_degree = 4
state_degree = 2

[rollout]
knots = 10
step = 0.01

[search]
population = 64
iterations = 100
probe_degree = 1

[dual]
alternations = 1

[sampling]
n_points = 256
n_refill = 64
control_grid = 61
n_terminal = 128
'''

UNICYCLE_RUN = '''
[problem]
kind = "unicycle"
horizon = 1.0
obstacles = [[0.0, 0.05, 0.4]]

[rollout]
knots = 4
step = 0.05

[dual]
iterations = 50
max_rounds = 2
alternations = 1

[sampling]
n_points = 32
n_refill = 0
control_grid = 5
n_terminal = 64
'''

UNICYCLE_BLOCKS_RUN = '''
[problem]
kind = "unicycle"
horizon = 1.0
obstacles = [OBSTACLE]

[basis]
kind = "blockwise"
time_degree = 1
state_degree = 2

[rollout]
knots = 4
step = 0.05

[dual]
iterations = 50
max_rounds = 2

[sampling]
n_points = 32
n_refill = 0
control_grid = 5
n_terminal = 32

[output]
heatmap_grid = [41, 41]
'''
MOVED = (0.3, -0.25, 0.4)


def _write(path, text):
    path.write_text(text)
    return str(path)


def _unicycle_blocks(path, obstacle):
    return _write(path, UNICYCLE_BLOCKS_RUN.replace('OBSTACLE', str(list(obstacle))))


@pytest.fixture(scope='module')
def small_config(tmp_path_factory):
    return _write(tmp_path_factory.mktemp('config') / 'run.toml', SMALL_RUN)


@pytest.fixture(scope='module')
def solved(tmp_path_factory, small_config):
    out = str(tmp_path_factory.mktemp('runs') / 'first')
    assert main(['--quiet', 'solve', '--config', small_config, '--out', out]) == EXIT_OK
    return out


class TestParser:

    def test_command_is_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_options(self):
        args = build_parser().parse_args(['solve', '--tau', 'inf', '--lambda', '0.5', '--seed', '3'])
        assert args.tau == float('inf')
        assert args.lam == 0.5
        assert args.seed == 3

    def test_missing_config(self, tmp_path):
        assert main(['--quiet', 'solve', '--config', str(tmp_path / 'nope.toml')]) == EXIT_VALIDATION


class TestCertify:

    def test_zero_certificate_passes(self, tmp_path, small_config):
        path = str(tmp_path / 'cert.toml')
        io.save_certificate(path, Certificate.zeros(FeatureBasis.polynomial(1, 1)), 'lqr')
        assert main(['--quiet', 'certify', '--config', small_config, path]) == EXIT_OK

    def test_undeclared_violation_fails(self, tmp_path, small_config):
        # v = 0.3 exceeds g = 0 at the horizon
        basis = FeatureBasis.polynomial(1, 0)
        path = str(tmp_path / 'cert.toml')
        io.save_certificate(path, Certificate.new(basis, [0.3]))
        assert main(['--quiet', 'certify', '--config', small_config, path]) == EXIT_VALIDATION
        io.save_certificate(path, Certificate.new(basis, [0.3], eps_T=0.3))
        assert main(['--quiet', 'certify', '--config', small_config, path]) == EXIT_OK


class TestLqrAccuracy:

    @pytest.fixture(scope='class')
    def lqr_config(self, tmp_path_factory):
        return _write(tmp_path_factory.mktemp('lqr') / 'run.toml', LQR_RUN)

    def test_solve_reaches_riccati_cost(self, tmp_path, lqr_config):
        out = str(tmp_path / 'lqr')
        assert main(['--quiet', 'solve', '--config', lqr_config, '--out', out]) == EXIT_OK
        gap = io.load_report(os.path.join(out, 'gap.toml'), 'gap')
        assert gap['J'] == pytest.approx(math.tanh(1.0), rel=5e-2)
        assert gap['underline_J'] <= gap['J'] + 1e-9
        search = io.load_report(os.path.join(out, 'search.toml'), 'search')
        assert not search['pruning_requested']
        assert search['evaluated'] == 64 * 100

    def test_certify_riccati_certificate(self, tmp_path, lqr_config, capsys):
        cfg = load_config(lqr_config)
        problem = cfg.problem.build()
        cert = RiccatiOracle(problem).project(FeatureBasis.tensor(1, 6, 2))
        report = estimate_feasibility(cert, problem, cfg.sampling.plan())
        cert = cert.with_tolerances(1.1 * report.eps_hat, 1.1 * report.eps_T_hat)
        path = str(tmp_path / 'riccati.toml')
        io.save_certificate(path, cert, problem.name)
        capsys.readouterr()
        assert main(['--quiet', 'certify', '--config', lqr_config, path]) == EXIT_OK
        printed = re.search(r'lower bound (\S+)', capsys.readouterr().out)
        assert printed is not None
        lower = float(printed.group(1))
        assert lower == pytest.approx(certified_lower_bound(cert, problem.initial_measure, problem.horizon), rel=1e-6)
        assert lower == pytest.approx(math.tanh(1.0), rel=5e-2)


class TestHeatmap:

    def test_export(self, tmp_path):
        config = _write(tmp_path / 'run.toml', '[problem]\nstate_dim = 2\n')
        cert = str(tmp_path / 'cert.toml')
        basis = FeatureBasis.polynomial(2, 2)
        io.save_certificate(cert, Certificate.new(basis, np.arange(basis.size, dtype=float)))
        output = str(tmp_path / 'map.csv')
        assert main(['--quiet', 'export-heatmap', '--config', config, '--grid', '5,4', cert, output]) == EXIT_OK
        rows = io.read_heatmap(output)
        assert rows.shape == (20, 3)
        assert rows[0, 0] == -3.0 and rows[-1, 1] == 3.0

    def test_dimension_mismatch(self, tmp_path):
        config = _write(tmp_path / 'run.toml', '[problem]\nstate_dim = 2\n')
        cert = str(tmp_path / 'cert.toml')
        io.save_certificate(cert, Certificate.zeros(FeatureBasis.polynomial(1, 2)))
        assert main(['--quiet', 'export-heatmap', '--config', config, cert, str(tmp_path / 'map.csv')]) == EXIT_VALIDATION

    def test_localize_difference(self):
        before = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]])
        after = before.copy()
        after[1, 2], after[2, 2] = 3.0, 1.5
        located = localize_difference(before, after, [(0.0, 0.0, 0.5)])
        assert located['max_difference'] == 2.0
        assert located['location'] == [0.0, 1.0]
        assert located['distances'] == [1.0]
        with pytest.raises(ValueError, match='different grids'):
            localize_difference(before, after[:2], [])


class TestSolve:

    def test_outputs(self, solved):
        for name in ('config.toml', 'manifest.toml', 'knots.txt', 'certificate.toml', 'gap.toml', 'dual.toml',
                     'search.toml', 'trace.jsonl'):
            assert os.path.exists(os.path.join(solved, name))
        gap = io.load_report(os.path.join(solved, 'gap.toml'), 'gap')
        assert gap['identity_gap'] <= 1e-9 * gap['scale']
        assert gap['underline_J'] <= gap['J'] + 1e-9
        assert len(io.read_trace(os.path.join(solved, 'trace.jsonl'))) == 3

    def test_deterministic(self, tmp_path, small_config, solved):
        out = str(tmp_path / 'second')
        assert main(['--quiet', 'solve', '--config', small_config, '--out', out]) == EXIT_OK
        for name in ('knots.txt', 'certificate.toml', 'gap.toml', 'search.toml', 'trace.jsonl'):
            with open(os.path.join(solved, name)) as a, open(os.path.join(out, name)) as b:
                assert a.read() == b.read()

    def test_compare(self, tmp_path, small_config, solved):
        out = str(tmp_path / 'seeded')
        assert main(['--quiet', 'solve', '--config', small_config, '--seed', '1', '--out', out]) == EXIT_OK
        assert main(['--quiet', 'compare', solved, out]) == EXIT_OK


class TestWarmstart:

    def test_running_cost_budget(self, tmp_path, small_config, solved):
        out = str(tmp_path / 'warm')
        cert = os.path.join(solved, 'certificate.toml')
        code = main(['--quiet', 'warmstart', '--config', small_config, '--out', out, '--budget-l', '0.1', cert])
        assert code == EXIT_OK
        comparison = toml.load(os.path.join(out, 'comparison.toml'))
        assert comparison['warm_start']['feasible_before_update']
        assert comparison['warm_start']['tolerances']['delta_l'] == 0.1
        assert os.path.exists(os.path.join(out, 'warm_certificate.toml'))

    def test_negative_shift(self, tmp_path, small_config, solved):
        cert = os.path.join(solved, 'certificate.toml')
        code = main(['--quiet', 'warmstart', '--config', small_config, '--out', str(tmp_path / 'w'), '--shift', '-0.1',
                     cert])
        assert code == EXIT_VALIDATION

    def test_shift_is_validated_on_the_shifted_window(self, tmp_path):
        config = _write(tmp_path / 'unicycle.toml', UNICYCLE_RUN)
        # v = 5 (1 - t) vanishes at T; checked against the unshifted horizon it exceeds g near the goal
        basis = FeatureBasis.from_exponents(3, [[1, 0, 0, 0]], time_origin=1.0, time_scale=-1.0)
        cert = str(tmp_path / 'cert.toml')
        io.save_certificate(cert, Certificate.new(basis, [5.0], eps=5.0, eps_T=1e-9), 'unicycle')
        assert main(['--quiet', 'certify', '--config', config, cert]) == EXIT_OK
        out = str(tmp_path / 'warm')
        assert main(['--quiet', 'warmstart', '--config', config, '--out', out, '--shift', '0.2', cert]) == EXIT_OK
        comparison = toml.load(os.path.join(out, 'comparison.toml'))
        assert comparison['warm_start']['feasible_before_update']
        warm, _ = io.load_certificate(os.path.join(out, 'warm_certificate.toml'))
        assert warm.t_shift == pytest.approx(0.2)

    def test_moved_obstacle(self, tmp_path):
        before = _unicycle_blocks(tmp_path / 'before.toml', (0.0, 0.05, 0.4))
        after = _unicycle_blocks(tmp_path / 'after.toml', MOVED)
        problem = load_config(before).problem.build()
        cert = str(tmp_path / 'cert.toml')
        io.save_certificate(cert, Certificate.zeros(load_config(before).basis.build(problem)), problem.name)
        out = str(tmp_path / 'warm')
        code = main(['--quiet', 'warmstart', '--config', before, '--target-config', after, '--out', out, cert])
        assert code == EXIT_OK
        comparison = toml.load(os.path.join(out, 'comparison.toml'))
        assert comparison['warm_start']['feasible_before_update']
        assert comparison['warm_start']['tolerances']['delta_l'] == pytest.approx(10.0 * 0.4**4)
        assert comparison['heatmap']['radii'] == [0.4]
        for name in ('heatmap_before.csv', 'heatmap_after.csv'):
            assert io.read_heatmap(os.path.join(out, name)).shape == (41 * 41, 3)

    def test_heatmaps_locate_a_change_at_the_moved_disc(self, tmp_path):
        config = _unicycle_blocks(tmp_path / 'after.toml', MOVED)
        position = FeatureBasis.radial(2, [(0.0, 0.05), MOVED[:2], (-1.0, 1.0)], 0.2)
        basis = FeatureBasis.blockwise(3, [((0, 1), position), ((2, ), FeatureBasis.polynomial(1, 1))])
        maps = []
        for label, psi in (('before', [1.0, 0.0, 0.5, 0.0, 0.0, 0.0]), ('after', [1.0, 0.8, 0.5, 0.0, 0.0, 0.0])):
            cert = str(tmp_path / f'{label}.toml')
            io.save_certificate(cert, Certificate.new(basis, psi))
            output = str(tmp_path / f'{label}.csv')
            assert main(['--quiet', 'export-heatmap', '--config', config, '--block', '0', cert, output]) == EXIT_OK
            maps.append(io.read_heatmap(output))
        located = localize_difference(*maps, [MOVED])
        assert located['max_difference'] == pytest.approx(0.8, rel=5e-2)
        assert located['distances'][0] <= 2 * MOVED[2]
