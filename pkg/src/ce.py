"""
Optimización por entropía cruzada (CE) y estimación IS posterior

Etapa de optimización: se muestrean n_opt trazas bajo v̂_{k−1}, se eleva el
umbral d_opt al cuantil (1 − ρ) de las cargas máximas y se actualiza v̂ con
las trazas élite. Cuando d_opt supera d_cap, v̂ queda fijo y se estima el
riesgo por muestreo por importancia en lotes.
"""
import json
import logging
import time
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from corpus import check_direction, empirical_quantile
from demand import DemandModel, exceedance_fraction
from errors import ConfigurationError, EliteSetEmptyError
from estimators import (CE_IS, RiskEstimate, StreamStats, batch_stats, effective_sample_size,
                        merge_stats, relative_error, run_is)
from sampling import (ProfileSampler, as_stream, at_counter, generator, initial_u,
                      log_importance_weights, make_is_params, sample_assignment, sample_times,
                      substream)

logger = logging.getLogger(__name__)

# Activos con más clientes que esto suelen dar estimaciones CE imprecisas con n_opt = 500
LARGE_ASSET_CUSTOMERS = 80

CEConfig = namedtuple(
    'CEConfig',
    ['m', 'n_opt', 'rho', 'alpha', 'q_spiky', 'beta_target', 'n_max', 'n_max_zero', 'batch',
     'd_opt_init', 'monotone_threshold', 'full_year_max'],
    defaults=(2000, 500, 0.05, 0.6, 0.95, 0.1, 20000, 10000, 50, 0.5, True, False),
)

DEFAULT_CONFIG = CEConfig()

CETraceEntry = namedtuple('CETraceEntry',
                          ['k', 'd_opt', 'v', 'quantile', 'r_hat', 'beta', 'samples', 'ess', 'stage'])


# ---------------------------------------------------------------------------
# Configuración
# ---------------------------------------------------------------------------

def validate_config(config):
    """Comprueba rangos de los parámetros; devuelve la misma configuración"""
    if not 0.0 < config.rho < 1.0:
        raise ConfigurationError("rho debe estar en (0, 1)")
    if not 0.0 < config.alpha <= 1.0:
        raise ConfigurationError("alpha debe estar en (0, 1]")
    if not 0.0 < config.q_spiky < 1.0:
        raise ConfigurationError("q_spiky debe estar en (0, 1)")
    if not config.beta_target > 0.0:
        raise ConfigurationError("beta_target debe ser positivo")
    if not config.d_opt_init > 0.0:
        raise ConfigurationError("d_opt_init debe ser positivo")
    for name in ('m', 'n_opt', 'n_max', 'n_max_zero', 'batch'):
        value = getattr(config, name)
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
            raise ConfigurationError(f"{name} debe ser un entero ≥ 1")
    return config


def load_config(path=None, **overrides):
    """
    Carga la configuración de métodos

    Args:
        path: archivo JSON opcional con un subconjunto de campos
        overrides: valores de línea de comandos (los None se ignoran)
    """
    values = {}
    if path:
        try:
            with open(path, encoding='utf-8') as f:
                values.update(json.load(f))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"No se pudo leer la configuración {path}: {exc}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - set(CEConfig._fields)
    if unknown:
        raise ConfigurationError(f"Parámetros desconocidos: {', '.join(sorted(unknown))}")
    return validate_config(DEFAULT_CONFIG._replace(**values))


def config_to_dict(config):
    return dict(config._asdict())


# ---------------------------------------------------------------------------
# Pasos del algoritmo
# ---------------------------------------------------------------------------

def ce_update(x, h_tilde, w):
    """
    v'_i = Σ H̃·W·x_i / Σ H̃·W

    Args:
        x: asignaciones (n, n_s)
        h_tilde: impacto élite por traza (n,)
        w: pesos de importancia (n,)
    """
    x = np.asarray(x, dtype=np.float64)
    mass = np.asarray(h_tilde, dtype=np.float64) * np.asarray(w, dtype=np.float64)
    total = float(np.sum(mass))
    if not total > 0.0:
        raise EliteSetEmptyError("Conjunto élite vacío: Σ H̃·W = 0")
    return (mass @ x) / total


def smooth_and_bound(v_new, v_prev, alpha, q_spiky):
    """Suavizado α·v' + (1 − α)·v̂_{k−1} acotado a [1 − q_spiky, 0.9]"""
    v_new = np.asarray(v_new, dtype=np.float64)
    v_prev = np.asarray(v_prev, dtype=np.float64)
    if v_new.shape != v_prev.shape:
        raise ValueError("Vectores de distinta longitud")
    return np.clip(alpha * v_new + (1.0 - alpha) * v_prev, 1.0 - q_spiky, 0.9)


def update_threshold(max_loads, rho):
    """Cuantil empírico (1 − ρ) de las cargas máximas por traza"""
    return empirical_quantile(max_loads, 1.0 - rho)


class CETrace:
    """Registro por iteración de una corrida CE"""

    def __init__(self, asset_id, direction, bin_ids):
        self.asset_id = asset_id
        self.direction = direction
        self.bin_ids = list(bin_ids)
        self.entries = []

    def record(self, k, d_opt, v, stage, quantile=None, r_hat=None, beta=None, samples=0, ess=None):
        entry = CETraceEntry(k, float(d_opt), np.array(v, dtype=np.float64), quantile,
                             r_hat, beta, int(samples), ess, stage)
        self.entries.append(entry)
        return entry

    @property
    def final_v(self):
        return self.entries[-1].v if self.entries else None

    @property
    def samples(self):
        return self.entries[-1].samples if self.entries else 0

    def to_records(self):
        records = []
        for e in self.entries:
            record = e._asdict()
            record['kind'] = 'iteration'
            record['v'] = [float(p) for p in e.v]
            records.append(record)
        records.append({
            'kind': 'final',
            'asset_id': self.asset_id,
            'direction': self.direction,
            'bin_ids': self.bin_ids,
            'v': [float(p) for p in self.final_v] if self.entries else [],
        })
        return records

    def to_jsonl(self, path=None):
        """Serializa la traza en JSONL; la última línea es el v̂ final"""
        text = ''.join(json.dumps(r, sort_keys=True) + '\n' for r in self.to_records())
        if path:
            with open(path, 'w', encoding='utf-8') as f:
                f.write(text)
        return text


# ---------------------------------------------------------------------------
# Algoritmo completo
# ---------------------------------------------------------------------------

Draw = namedtuple('Draw', ['x', 'loads', 'w', 'max_loads'])


def _draw(model, sampler, params, config, stream, executor=None):
    """n_opt trazas bajo v̂ en sublotes de tamaño batch con flujos propios"""
    n_opt, batch = config.n_opt, config.batch

    def run(j):
        gen = generator(at_counter(stream, j))
        size = min(batch, n_opt - j * batch)
        x = sample_assignment(params, True, gen, size=size)
        rows = sampler.assigned_rows(x, gen)
        thetas = sample_times(config.m, model.T, gen, size=size)
        loads = model.signed_loads(rows, thetas, params.direction)
        if config.full_year_max:
            max_loads = model.full_year_max_loads(rows, params.direction)
        else:
            max_loads = loads.max(axis=1)
        return x, loads, max_loads

    chunks = range(-(-n_opt // batch))
    parts = list(executor.map(run, chunks)) if executor else [run(j) for j in chunks]
    x = np.concatenate([p[0] for p in parts])
    loads = np.concatenate([p[1] for p in parts])
    max_loads = np.concatenate([p[2] for p in parts])
    w = np.exp(log_importance_weights(x, params.u, params.v))
    return Draw(x, loads, w, max_loads)


def elite_scores(draw, level, d_cap, full_year_max=False):
    """
    H̃ de cada traza para la actualización CE

    Se evalúa sobre los mismos pasos que dieron el umbral: las cargas
    muestreadas, o el máximo anual con full_year_max. Bajo d_cap el nivel
    es inclusivo; en d_cap se usa la sobrecarga estricta.
    """
    if full_year_max:
        hits = draw.max_loads >= level if level < d_cap else draw.max_loads > d_cap
        return hits.astype(np.float64)
    if level < d_cap:
        return exceedance_fraction(draw.loads, level, inclusive=True)
    return exceedance_fraction(draw.loads, d_cap)


def _result(asset, direction, stats, started, consumed, converged, zero_flagged=False, ess=None):
    r_hat = 0.0 if zero_flagged else max(float(stats.mean), 0.0)
    return RiskEstimate(
        method=CE_IS,
        direction=direction,
        r_hat=r_hat,
        beta=None if zero_flagged else relative_error(stats),
        n=int(stats.n),
        elapsed=time.perf_counter() - started,
        converged=converged,
        zero_flagged=zero_flagged or r_hat == 0.0,
        asset_id=asset.asset_id,
        traces=int(consumed),
        ess=ess,
    )


def ce_estimate(asset, corpus, direction, config=DEFAULT_CONFIG, rng=0, workers=1):
    """
    Estimación CE-IS del riesgo de sobrecarga de un activo

    Returns:
        (RiskEstimate, CETrace)
    """
    check_direction(direction)
    validate_config(config)
    started = time.perf_counter()
    stream = as_stream(rng)
    model = DemandModel(asset, corpus)
    u = initial_u(asset, corpus, direction)
    params = make_is_params(u, u, direction)
    sampler = ProfileSampler(model, direction)
    d_cap = asset.d_cap
    trace = CETrace(asset.asset_id, direction, model.bin_ids)

    if model.n_s > LARGE_ASSET_CUSTOMERS:
        logger.warning("Activo %s con %d clientes: n_opt=%d puede ser insuficiente",
                       asset.asset_id, model.n_s, config.n_opt)

    d_opt = config.d_opt_init * d_cap
    trace.record(0, d_opt, params.v, 'init')
    opt_stream = substream(stream, 0)
    running = StreamStats()
    consumed = 0
    exceeded = False
    k = 0

    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while True:
            k += 1
            for attempt in (0, 1):
                draw = _draw(model, sampler, params, config, substream(opt_stream, attempt, k), executor)
                consumed += config.n_opt
                h_cap = exceedance_fraction(draw.loads, d_cap)
                exceeded = exceeded or bool(np.any(h_cap > 0))
                running = merge_stats(running, batch_stats(h_cap * draw.w))
                beta = relative_error(running)
                ess = effective_sample_size(draw.w)

                # Convergencia ya en la etapa de optimización
                if beta is not None and beta < config.beta_target:
                    trace.record(k, d_opt, params.v, 'converged', r_hat=running.mean, beta=beta,
                                 samples=consumed, ess=ess)
                    return _result(asset, direction, running, started, consumed, True, ess=ess), trace

                # Probabilidad de sobrecarga prácticamente nula
                if consumed > config.n_max_zero and not exceeded:
                    logger.info("Activo %s (%s): sin sobrecargas en %d trazas", asset.asset_id,
                                direction, consumed)
                    trace.record(k, d_opt, params.v, 'zero', samples=consumed, ess=ess)
                    return _result(asset, direction, running, started, consumed, False,
                                   zero_flagged=True, ess=ess), trace

                if consumed >= config.n_max:
                    logger.warning("Activo %s (%s): presupuesto agotado durante la optimización",
                                   asset.asset_id, direction)
                    trace.record(k, d_opt, params.v, 'budget', r_hat=running.mean, beta=beta,
                                 samples=consumed, ess=ess)
                    return _result(asset, direction, running, started, consumed, False, ess=ess), trace

                quantile = update_threshold(draw.max_loads, config.rho)
                if k == 1 or not config.monotone_threshold:
                    d_new = quantile
                else:
                    d_new = max(d_opt, quantile)
                h_tilde = elite_scores(draw, d_new, d_cap, config.full_year_max)
                try:
                    v_prime = ce_update(draw.x, h_tilde, draw.w)
                    break
                except EliteSetEmptyError:
                    if attempt == 1:
                        logger.warning("Activo %s (%s): conjunto élite vacío tras reintento (k=%d, d_opt=%.3f)",
                                       asset.asset_id, direction, k, d_new)
                        trace.record(k, d_new, params.v, 'elite-empty', quantile=quantile,
                                     r_hat=running.mean, beta=beta, samples=consumed, ess=ess)
                        return _result(asset, direction, running, started, consumed, False, ess=ess), trace
                    logger.info("Activo %s (%s): conjunto élite vacío, se repite la iteración %d",
                                asset.asset_id, direction, k)

            d_opt = d_new
            v = smooth_and_bound(v_prime, params.v, config.alpha, config.q_spiky)
            params = make_is_params(u, v, direction)
            trace.record(k, d_opt, params.v, 'opt', quantile=quantile, r_hat=running.mean, beta=beta,
                         samples=consumed, ess=ess)
            logger.info("CE %s (%s) k=%d: d_opt=%.3f d_cap=%.3f ESS=%.1f", asset.asset_id, direction,
                        k, d_opt, d_cap, ess)
            if d_opt > d_cap:
                break
    finally:
        if executor:
            executor.shutdown()

    # v̂ fijo: estimación IS por lotes con el presupuesto restante
    estimate = run_is(asset, corpus, params, config.m, config.beta_target, config.n_max - consumed,
                      batch=config.batch, rng=substream(stream, 1), workers=workers, method=CE_IS,
                      traces_before=consumed, model=model)
    estimate = estimate._replace(elapsed=time.perf_counter() - started)
    trace.record(k + 1, d_opt, params.v, 'estimate', r_hat=estimate.r_hat, beta=estimate.beta,
                 samples=estimate.traces, ess=estimate.ess)
    return estimate, trace
