"""
Estimadores de riesgo de sobrecarga con parada por error relativo

Cada traza aporta H (fracción de pasos muestreados en sobrecarga) o H·W
en muestreo por importancia. Las trazas se evalúan en lotes; tras cada
lote se decide si el error relativo β ya está por debajo del objetivo.
"""
import logging
import math
import time
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from corpus import check_direction
from demand import DemandModel, exceedance_fraction
from errors import ConfigurationError
from sampling import (ProfileSampler, as_stream, at_counter, check_biased, generator,
                      check_sample_size, log_importance_weights, sample_assignment, sample_times,
                      uniform_rows)

logger = logging.getLogger(__name__)

REF = 'ref'
MC = 'mc'
CE_IS = 'ce-is'
GEN_IS = 'gen-is'
METHODS = (REF, MC, CE_IS, GEN_IS)
IS_METHODS = (CE_IS, GEN_IS)

DEFAULT_BATCH = 50

StreamStats = namedtuple('StreamStats', ['n', 'mean', 'M2'], defaults=(0, 0.0, 0.0))

RiskEstimate = namedtuple(
    'RiskEstimate',
    ['method', 'direction', 'r_hat', 'beta', 'n', 'elapsed', 'converged', 'zero_flagged',
     'asset_id', 'traces', 'ess'],
    defaults=(None, None, None),
)


# ---------------------------------------------------------------------------
# Estadística en flujo
# ---------------------------------------------------------------------------

def update_stats(stats, value):
    """Actualización de Welford con un valor"""
    n = stats.n + 1
    delta = value - stats.mean
    mean = stats.mean + delta / n
    return StreamStats(n, mean, stats.M2 + delta * (value - mean))


def merge_stats(a, b):
    """Combina dos resúmenes (fórmula de Chan)"""
    if a.n == 0:
        return b
    if b.n == 0:
        return a
    n = a.n + b.n
    delta = b.mean - a.mean
    mean = a.mean + delta * b.n / n
    return StreamStats(n, mean, a.M2 + b.M2 + delta * delta * a.n * b.n / n)


def batch_stats(values):
    """Resumen de un lote en dos pasadas"""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        return StreamStats()
    mean = float(np.mean(values))
    return StreamStats(int(values.size), mean, float(np.sum(np.square(values - mean))))


def sample_variance(stats):
    if stats.n < 2:
        return 0.0
    return max(stats.M2, 0.0) / (stats.n - 1)


def relative_error(stats):
    """
    β = σ̂ / (r̂·√n)

    Returns:
        None mientras n < 2 o r̂ = 0 (β indefinido, no convergido)
    """
    if stats.n < 2 or stats.mean <= 0:
        return None
    return math.sqrt(sample_variance(stats)) / (stats.mean * math.sqrt(stats.n))


def effective_sample_size(weights):
    """ESS = (ΣW)² / ΣW²"""
    weights = np.asarray(weights, dtype=np.float64)
    total_sq = float(np.sum(np.square(weights)))
    if total_sq == 0.0:
        return 0.0
    return float(np.sum(weights)) ** 2 / total_sq


def estimate_to_record(estimate):
    """Diccionario JSON de una estimación"""
    record = estimate._asdict()
    for key in ('r_hat', 'beta', 'elapsed', 'ess'):
        if record[key] is not None:
            record[key] = float(record[key])
    for key in ('n', 'traces'):
        if record[key] is not None:
            record[key] = int(record[key])
    record['converged'] = bool(record['converged'])
    record['zero_flagged'] = bool(record['zero_flagged'])
    return record


def estimate_from_record(data):
    fields = {k: data.get(k) for k in RiskEstimate._fields}
    return RiskEstimate(**fields)


# ---------------------------------------------------------------------------
# Bucle por lotes
# ---------------------------------------------------------------------------

SequentialResult = namedtuple('SequentialResult', ['stats', 'converged', 'weight_sum', 'weight_sq_sum'])


def _sequential(batch_fn, stream, beta_target, n_limit, batch=DEFAULT_BATCH, workers=1):
    """
    Acumula lotes hasta β < beta_target o n ≥ n_limit

    El lote b usa el flujo con contador b. Con varios workers los lotes se
    evalúan por oleadas y se combinan en orden, descartando los posteriores
    a la convergencia, así el resultado coincide con la ejecución en serie.
    """
    if batch < 1 or n_limit < 1:
        raise ConfigurationError("El tamaño de lote y n_max deben ser ≥ 1")
    n_batches = -(-n_limit // batch)
    size_of = lambda b: min(batch, n_limit - b * batch)
    run = lambda b: batch_fn(at_counter(stream, b), size_of(b))

    stats = StreamStats()
    weight_sum = weight_sq_sum = 0.0
    converged = False
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        b = 0
        while b < n_batches and not converged:
            wave = list(range(b, min(b + max(1, workers), n_batches)))
            results = list(executor.map(run, wave)) if executor else [run(b)]
            for k, (values, weights) in zip(wave, results):
                stats = merge_stats(stats, batch_stats(values))
                if weights is not None:
                    weight_sum += float(np.sum(weights))
                    weight_sq_sum += float(np.sum(np.square(weights)))
                b = k + 1
                beta = relative_error(stats)
                if beta is not None and beta < beta_target:
                    converged = True
                    break
    finally:
        if executor:
            executor.shutdown()
    return SequentialResult(stats, converged, weight_sum, weight_sq_sum)


def _finish(method, direction, asset, result, started, traces=None):
    stats = result.stats
    ess = None
    if result.weight_sq_sum > 0:
        ess = result.weight_sum ** 2 / result.weight_sq_sum
    r_hat = max(float(stats.mean), 0.0)
    return RiskEstimate(
        method=method,
        direction=direction,
        r_hat=r_hat,
        beta=relative_error(stats),
        n=int(stats.n),
        elapsed=time.perf_counter() - started,
        converged=result.converged,
        zero_flagged=r_hat == 0.0,
        asset_id=asset.asset_id,
        traces=int(stats.n if traces is None else traces),
        ess=ess,
    )


def plain_batch(model, direction, m, full_year=False):
    """Función de lote H bajo la selección nominal plana"""
    def run(stream, size):
        gen = generator(stream)
        rows = uniform_rows(model, size, gen)
        thetas = None if full_year else sample_times(m, model.T, gen, size=size)
        loads = model.signed_loads(rows, thetas, direction)
        return exceedance_fraction(loads, model.asset.d_cap), None
    return run


def weighted_batch(model, sampler, params, m, full_year=False):
    """Función de lote H·W bajo la distribución sesgada v"""
    def run(stream, size):
        gen = generator(stream)
        x = sample_assignment(params, True, gen, size=size)
        rows = sampler.assigned_rows(x, gen)
        thetas = None if full_year else sample_times(m, model.T, gen, size=size)
        loads = model.signed_loads(rows, thetas, params.direction)
        h = exceedance_fraction(loads, model.asset.d_cap)
        w = np.exp(log_importance_weights(x, params.u, params.v))
        return h * w, w
    return run


# ---------------------------------------------------------------------------
# Estimadores
# ---------------------------------------------------------------------------

def run_mc(asset, corpus, direction, m, beta_target, n_max, rng, batch=DEFAULT_BATCH, workers=1,
           full_year=False, method=MC):
    """
    Monte Carlo convencional: selección uniforme y m pasos por traza

    Args:
        rng: semilla entera o RngStream
        full_year: evalúa las T trazas completas (método de referencia)
    """
    check_direction(direction)
    started = time.perf_counter()
    model = DemandModel(asset, corpus)
    if not full_year:
        check_sample_size(m, corpus.T)
    result = _sequential(plain_batch(model, direction, m, full_year), as_stream(rng),
                         beta_target, n_max, batch, workers)
    estimate = _finish(method, direction, asset, result, started)
    logger.debug("%s %s (%s): r=%.3e β=%s n=%d", method, asset.asset_id, direction,
                 estimate.r_hat, estimate.beta, estimate.n)
    return estimate


def run_reference(asset, corpus, direction, beta_target, n_max, rng, batch=DEFAULT_BATCH, workers=1):
    """Método de referencia: H sobre el año completo θ* = (0..T−1)"""
    return run_mc(asset, corpus, direction, corpus.T, beta_target, n_max, rng, batch, workers,
                  full_year=True, method=REF)


def run_is(asset, corpus, params, m, beta_target, n_max, batch=DEFAULT_BATCH, rng=0, workers=1,
           method=GEN_IS, full_year=False, traces_before=0, model=None):
    """
    Estimación por muestreo por importancia con v fijo

    Args:
        params: ISParams (u, v, dirección)
        method: etiqueta del registro, ce-is o gen-is
        traces_before: trazas ya consumidas (p. ej. en la optimización CE)
    """
    if method not in IS_METHODS:
        raise ConfigurationError(f"Método IS inválido: {method!r} (use {', '.join(IS_METHODS)})")
    check_direction(params.direction)
    started = time.perf_counter()
    model = model or DemandModel(asset, corpus)
    if params.u.shape != (model.n_s,) or params.v.shape != (model.n_s,):
        raise ConfigurationError(f"Los parámetros IS deben tener {model.n_s} componentes")
    check_biased(params.u, params.v)
    if not full_year:
        check_sample_size(m, corpus.T)
    sampler = ProfileSampler(model, params.direction)
    result = _sequential(weighted_batch(model, sampler, params, m, full_year), as_stream(rng),
                         beta_target, n_max, batch, workers)
    estimate = _finish(method, params.direction, asset, result, started,
                       traces=traces_before + result.stats.n)
    if estimate.ess is not None and estimate.n and estimate.ess < 0.01 * estimate.n:
        logger.warning("Activo %s: ESS %.1f de %d trazas, pesos degenerados",
                       asset.asset_id, estimate.ess, estimate.n)
    return estimate
