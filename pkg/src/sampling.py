"""
Distribuciones de selección de perfiles: nominal y sesgada

Cada cliente del grupo 1 se asigna primero a la categoría spiky (con
probabilidad u_i nominal o v_i sesgada) o smooth, y luego recibe un perfil
uniforme dentro del conjunto correspondiente de su bin.
"""
import logging
from collections import namedtuple

import numpy as np

from corpus import check_direction
from errors import ConfigurationError, DegenerateDistributionError, StateError

logger = logging.getLogger(__name__)

RngStream = namedtuple('RngStream', ['seed', 'stream_id', 'counter'], defaults=((), 0))

ISParams = namedtuple('ISParams', ['u', 'v', 'direction'])


# ---------------------------------------------------------------------------
# Flujos aleatorios reproducibles
# ---------------------------------------------------------------------------

def as_stream(rng):
    """Acepta un entero (semilla) o un RngStream"""
    if isinstance(rng, RngStream):
        return rng
    return RngStream(int(rng))


def substream(stream, *keys):
    """Flujo hijo identificado por claves adicionales"""
    return stream._replace(stream_id=tuple(stream.stream_id) + tuple(int(k) for k in keys), counter=0)


def at_counter(stream, counter):
    return stream._replace(counter=int(counter))


def generator(stream):
    """Generador Philox determinista para (seed, stream_id, counter)"""
    stream = as_stream(stream)
    key = tuple(int(k) for k in stream.stream_id) + (int(stream.counter),)
    seq = np.random.SeedSequence(int(stream.seed) % (1 << 64), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return generator(as_stream(rng))


# ---------------------------------------------------------------------------
# Parámetros de muestreo por importancia
# ---------------------------------------------------------------------------

def initial_u(asset, corpus, direction):
    """Probabilidades nominales: fracción spiky del bin de cada cliente"""
    check_direction(direction)
    if not corpus.is_classified(direction):
        raise StateError(f"Corpus sin clasificar para la dirección {direction}")
    u = []
    for customer in asset.smart_meter_customers:
        b = corpus.bin(customer.bin_id)
        u.append(b.spiky(direction).size / b.size)
    u = np.array(u, dtype=np.float64)
    if np.any(u >= 1.0):
        logger.warning("Activo %s: %d clientes en bins degenerados (u = 1)",
                       asset.asset_id, int(np.sum(u >= 1.0)))
    return u


def make_is_params(u, v, direction):
    """
    Valida (u, v) y fija v_i = u_i en clientes de bins degenerados

    Un bin cuyo conjunto smooth está vacío tiene u_i = 1; fijar v_i = u_i
    hace que x_i = 1 siempre y que su factor de peso sea 1.
    """
    check_direction(direction)
    u = np.asarray(u, dtype=np.float64)
    v = np.array(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ConfigurationError("u y v deben ser vectores de igual longitud")
    if np.any((u <= 0) | (u > 1)):
        raise ConfigurationError("Probabilidades nominales fuera de (0, 1]")
    pinned = u >= 1.0
    v[pinned] = u[pinned]
    check_biased(u, v)
    return ISParams(u, v, direction)


def check_biased(u, v):
    degenerate = ((v <= 0.0) | (v >= 1.0)) & (v != u)
    if np.any(degenerate) or np.any(np.isnan(v)):
        raise DegenerateDistributionError(
            f"Probabilidades sesgadas degeneradas en {int(np.sum(degenerate))} clientes")


def bernoulli_log_density(x, p):
    """log Π p_i^{x_i} (1 − p_i)^{1 − x_i} por fila de x"""
    x = np.asarray(x, dtype=bool)
    with np.errstate(divide='ignore'):
        return np.where(x, np.log(p), np.log1p(-p)).sum(axis=-1)


def log_importance_weights(x, u, v):
    """log W(x; u, v) = log f(x; u) − log g(x; v), calculado por cliente"""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    check_biased(u, v)
    same = u == v
    with np.errstate(divide='ignore', invalid='ignore'):
        log_spiky = np.where(same, 0.0, np.log(u) - np.log(v))
        log_smooth = np.where(same, 0.0, np.log1p(-u) - np.log1p(-v))
    return np.where(np.asarray(x, dtype=bool), log_spiky, log_smooth).sum(axis=-1)


def importance_weight(x, params):
    """W(x; u, v) = f(x; u) / g(x; v)"""
    return float(np.exp(log_importance_weights(x, params.u, params.v)))


def sample_assignment(params, use_biased, rng, size=None):
    """Asignaciones spiky/smooth independientes (True = spiky)"""
    p = params.v if use_biased else params.u
    gen = as_generator(rng)
    shape = p.shape if size is None else (size,) + p.shape
    return gen.random(shape) < p


def check_sample_size(m, T):
    if not 1 <= m <= T:
        raise ConfigurationError(f"m={m} fuera de [1, {T}]")


def sample_times(m, T, rng, full_year=False, size=None):
    """
    Pasos de tiempo i.i.d. uniformes con reemplazo en {0..T−1}

    Con full_year devuelve el año completo (0..T−1).
    """
    if full_year:
        return np.arange(T, dtype=np.int64)
    check_sample_size(m, T)
    gen = as_generator(rng)
    shape = (m,) if size is None else (size, m)
    return gen.integers(0, T, shape, dtype=np.int64)


def uniform_rows(model, size, gen):
    """Selección nominal plana: perfil uniforme dentro de cada bin (filas globales)"""
    draws = gen.random((size, model.n_s))
    return model.offsets + (draws * model.bin_sizes).astype(np.int64)


class ProfileSampler:
    """
    Sorteo vectorizado de selecciones de perfiles para un activo

    Guarda, por cliente del grupo 1, las filas globales de sus conjuntos
    spiky y smooth en la dirección indicada.
    """

    def __init__(self, model, direction):
        check_direction(direction)
        self.model = model
        self.direction = direction
        self.spiky_rows = []
        self.smooth_rows = []
        for bin_id, offset in zip(model.bin_ids, model.offsets):
            b = model.corpus.bin(bin_id)
            self.spiky_rows.append(offset + b.spiky(direction))
            self.smooth_rows.append(offset + b.smooth(direction))

    def uniform_rows(self, size, gen):
        return uniform_rows(self.model, size, gen)

    def assigned_rows(self, x, gen):
        """Selección en dos etapas dada la asignación x (b, n_s)"""
        x = np.asarray(x, dtype=bool)
        draws = gen.random(x.shape)
        rows = np.empty(x.shape, dtype=np.int64)
        for i, (spiky, smooth) in enumerate(zip(self.spiky_rows, self.smooth_rows)):
            chosen_spiky = spiky[(draws[:, i] * spiky.size).astype(np.int64)]
            if smooth.size:
                chosen_smooth = smooth[(draws[:, i] * smooth.size).astype(np.int64)]
            elif np.all(x[:, i]):
                chosen_smooth = chosen_spiky
            else:
                raise StateError(f"Conjunto smooth vacío en el bin {self.model.bin_ids[i]}")
            rows[:, i] = np.where(x[:, i], chosen_spiky, chosen_smooth)
        return rows

    def to_selection(self, rows):
        """Convierte filas globales en índices base 0 dentro de cada bin"""
        return np.asarray(rows, dtype=np.int64) - self.model.offsets


def sample_profiles(asset, corpus, x, direction, rng, model=None):
    """Selección de perfiles (índices por bin) para la asignación x"""
    from demand import DemandModel
    model = model or DemandModel(asset, corpus)
    sampler = ProfileSampler(model, direction)
    x = np.asarray(x, dtype=bool)
    rows = sampler.assigned_rows(np.atleast_2d(x), as_generator(rng))
    selection = sampler.to_selection(rows)
    return selection[0] if x.ndim == 1 else selection
