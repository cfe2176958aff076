"""Plain-text record formats.

Measures are whitespace-separated tables with ``#`` header lines, certificates and
reports are TOML, traces are JSON lines and heat maps are CSV. Floats are written with
17 significant digits so that every record reloads bit for bit.
"""
import json
import logging
import math
import os
import platform
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import jax
import jax.numpy as jnp
import numpy as np
import scipy
import toml

import jfom
from jfom.certificates.basis import BasisKind, FeatureBasis
from jfom.certificates.certificate import Certificate
from jfom.measures import BoundaryMeasure, OccupationMeasure, PrimalPair, Provenance

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'


def _header(path: str) -> Dict[str, str]:
    out = {}
    with open(path) as f:
        for line in f:
            if not line.startswith('#'):
                break
            key, _, value = line[1:].partition('=')
            out[key.strip()] = value.strip()
    return out


def _table(path: str, n_columns: int) -> np.ndarray:
    data = np.loadtxt(path, comments='#', ndmin=2)
    if data.size == 0:
        return np.zeros((0, n_columns))
    if data.shape[1] != n_columns:
        raise ValueError(f"{path}: expected {n_columns} columns, found {data.shape[1]}")
    return data


def save_boundary_measure(path: str, measure: BoundaryMeasure) -> None:
    """Columns: weight x_1 .. x_n."""
    data = np.concatenate([np.asarray(measure.weights)[:, None], np.asarray(measure.x)], axis=1)
    header = f"kind = boundary\ntime = {measure.time!r}\ndim_x = {measure.dim_x}\ncolumns = weight x[{measure.dim_x}]"
    np.savetxt(path, data, fmt=FLOAT_FORMAT, header=header)


def load_boundary_measure(path: str) -> BoundaryMeasure:
    header = _header(path)
    if header.get('kind') != 'boundary':
        raise ValueError(f"{path} is not a boundary measure record")
    dim_x = int(header['dim_x'])
    data = _table(path, 1 + dim_x)
    return BoundaryMeasure.new(float(header['time']), data[:, 0], data[:, 1:].reshape(-1, dim_x))


def save_occupation_measure(path: str, measure: OccupationMeasure) -> None:
    """Columns: weight t x_1 .. x_n u_1 .. u_m."""
    dim_x, dim_u = int(measure.x.shape[1]), int(measure.u.shape[1])
    data = np.concatenate([
        np.asarray(measure.weights)[:, None],
        np.asarray(measure.t)[:, None],
        np.asarray(measure.x),
        np.asarray(measure.u),
    ], axis=1)
    header = f"kind = occupation\ndim_x = {dim_x}\ndim_u = {dim_u}\ncolumns = weight t x[{dim_x}] u[{dim_u}]"
    np.savetxt(path, data, fmt=FLOAT_FORMAT, header=header)


def load_occupation_measure(path: str) -> OccupationMeasure:
    header = _header(path)
    if header.get('kind') != 'occupation':
        raise ValueError(f"{path} is not an occupation measure record")
    dim_x, dim_u = int(header['dim_x']), int(header['dim_u'])
    data = _table(path, 2 + dim_x + dim_u)
    if len(data) == 0:
        return OccupationMeasure.empty(dim_x, dim_u)
    return OccupationMeasure.new(data[:, 0], data[:, 1], data[:, 2:2 + dim_x], data[:, 2 + dim_x:])


def basis_to_dict(basis: FeatureBasis) -> Dict[str, Any]:
    out = {'kind': basis.kind.name.lower(), 'dim_x': basis.dim_x}
    if basis.kind == BasisKind.BLOCKWISE:
        out['blocks'] = [{'indices': list(S), 'basis': basis_to_dict(sub)} for S, sub in basis.blocks]
        return out
    out.update(time_origin=basis.time_origin, time_scale=basis.time_scale)
    if basis.kind == BasisKind.POLYNOMIAL:
        out['exponents'] = [list(row) for row in basis.exponents]
    else:
        out.update(centers=[list(c) for c in basis.centers], width=basis.width, time_degree=basis.time_degree)
    return out


def basis_from_dict(data: Dict[str, Any]) -> FeatureBasis:
    kind = data['kind']
    dim_x = int(data['dim_x'])
    if kind == 'blockwise':
        return FeatureBasis.blockwise(dim_x, [(b['indices'], basis_from_dict(b['basis'])) for b in data['blocks']])
    if kind == 'polynomial':
        return FeatureBasis.from_exponents(dim_x, data['exponents'], data['time_origin'], data['time_scale'])
    if kind == 'radial':
        return FeatureBasis.radial(dim_x, data['centers'], data['width'], int(data['time_degree']),
                                   data['time_origin'], data['time_scale'])
    raise ValueError(f"unknown basis kind {kind!r}")


def save_certificate(path: str, cert: Certificate, problem: str = '') -> None:
    record = {
        'certificate': {
            'psi': [float(v) for v in np.asarray(cert.psi)],
            'eps': cert.eps,
            'eps_T': cert.eps_T,
            't_shift': cert.t_shift,
            'note': cert.note,
            'problem': problem,
        },
        'basis': basis_to_dict(cert.basis),
    }
    with open(path, 'w') as f:
        toml.dump(record, f)


def load_certificate(path: str) -> Tuple[Certificate, str]:
    """The certificate and the name of the problem it was produced for."""
    record = toml.load(path)
    try:
        body = record['certificate']
        basis = basis_from_dict(record['basis'])
    except KeyError as e:
        raise ValueError(f"{path} is missing {e} and is not a certificate record") from None
    cert = Certificate.new(basis, jnp.asarray(body['psi'], dtype=float), body.get('eps', 0.0), body.get('eps_T', 0.0),
                           body.get('t_shift', 0.0), body.get('note', ''))
    return cert, body.get('problem', '')


def save_pair(directory: str, pair: PrimalPair) -> None:
    os.makedirs(directory, exist_ok=True)
    save_occupation_measure(os.path.join(directory, 'occupation.txt'), pair.occupation)
    save_boundary_measure(os.path.join(directory, 'terminal.txt'), pair.terminal)
    meta = {'provenance': pair.provenance.name.lower(), 'source': pair.source, 'nodes': list(pair.nodes)}
    with open(os.path.join(directory, 'pair.toml'), 'w') as f:
        toml.dump(meta, f)


def load_pair(directory: str) -> PrimalPair:
    meta = toml.load(os.path.join(directory, 'pair.toml'))
    occupation = load_occupation_measure(os.path.join(directory, 'occupation.txt'))
    terminal = load_boundary_measure(os.path.join(directory, 'terminal.txt'))
    return PrimalPair.new(occupation, terminal, Provenance[meta['provenance'].upper()], terminal.time,
                          nodes=meta.get('nodes', ()), source=meta.get('source', ''))


def save_library(directory: str, pairs: Sequence[PrimalPair], labels: Optional[Sequence[str]] = None) -> None:
    """A rollout library: one pair directory per member plus index.toml."""
    labels = [f"member_{k:04d}" for k in range(len(pairs))] if labels is None else list(labels)
    if len(labels) != len(pairs) or len(set(labels)) != len(labels):
        raise ValueError("library labels must be unique and one per pair")
    os.makedirs(directory, exist_ok=True)
    for label, pair in zip(labels, pairs):
        save_pair(os.path.join(directory, label), pair)
    with open(os.path.join(directory, 'index.toml'), 'w') as f:
        toml.dump({'members': [{'label': l, 'source': p.source} for l, p in zip(labels, pairs)]}, f)


def load_library(directory: str) -> List[PrimalPair]:
    index = toml.load(os.path.join(directory, 'index.toml'))
    return [load_pair(os.path.join(directory, member['label'])) for member in index.get('members', [])]


def _plain(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, (jax.Array, np.ndarray)):
        return np.asarray(value).tolist()
    if isinstance(value, tuple) and hasattr(value, '_asdict'):
        return {k: _plain(v) for k, v in value._asdict().items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def write_trace(path: str, records: Iterable[NamedTuple]) -> None:
    """One JSON object per line with sorted keys."""
    with open(path, 'w') as f:
        for record in records:
            f.write(json.dumps(_plain(record), sort_keys=True) + '\n')


def read_trace(path: str) -> List[Dict[str, Any]]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def save_report(path: str, report: NamedTuple, section: str = 'report') -> None:
    """A NamedTuple report as one TOML table; non-finite floats are written as strings."""
    table = {}
    for key, value in _plain(report).items():
        if isinstance(value, float) and not math.isfinite(value):
            value = repr(value)
        table[key] = value
    with open(path, 'w') as f:
        toml.dump({section: table}, f)


def load_report(path: str, section: str = 'report') -> Dict[str, Any]:
    table = toml.load(path)[section]
    return {k: float(v) if v in ('inf', '-inf', 'nan') else v for k, v in table.items()}


def save_knots(path: str, knots: np.ndarray, t0: float, T: float) -> None:
    knots = np.asarray(knots).reshape(len(knots), -1)
    np.savetxt(path, knots, fmt=FLOAT_FORMAT, header=f"kind = knots\nt0 = {t0!r}\nT = {T!r}")


def load_knots(path: str) -> Tuple[np.ndarray, float, float]:
    header = _header(path)
    if header.get('kind') != 'knots':
        raise ValueError(f"{path} is not a knots record")
    return np.loadtxt(path, comments='#', ndmin=2), float(header['t0']), float(header['T'])


def write_manifest(path: str, config_hash: str, seeds: Dict[str, int], command: str,
                   extra: Optional[Dict[str, Any]] = None) -> None:
    manifest = {
        'run': {
            'command': command,
            'config_hash': config_hash
        },
        'seeds': dict(seeds),
        'versions': {
            'jfom': jfom.__version__,
            'jax': jax.__version__,
            'numpy': np.__version__,
            'scipy': scipy.__version__,
            'python': platform.python_version(),
        },
    }
    if extra:
        manifest['run'].update(extra)
    with open(path, 'w') as f:
        toml.dump(manifest, f)


def read_manifest(path: str) -> Dict[str, Any]:
    return toml.load(path)


def write_heatmap(path: str, xs: np.ndarray, ys: np.ndarray, values: np.ndarray) -> None:
    """CSV with header x,y,value; x varies slowest."""
    xs, ys, values = np.asarray(xs), np.asarray(ys), np.asarray(values)
    grid_x, grid_y = np.meshgrid(xs, ys, indexing='ij')
    rows = np.stack([grid_x.ravel(), grid_y.ravel(), values.reshape(grid_x.shape).ravel()], axis=1)
    np.savetxt(path, rows, fmt=FLOAT_FORMAT, delimiter=',', header='x,y,value', comments='')


def read_heatmap(path: str) -> np.ndarray:
    return np.loadtxt(path, delimiter=',', skiprows=1, ndmin=2)
