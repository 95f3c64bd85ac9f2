"""
Campañas de comparación de métodos y reporte de aceleraciones

Ejecuta corridas replicadas por (activo, método, dirección), filtra las
estimaciones inexactas con la prueba t de Welch frente al método de
referencia y resume la aceleración media por orden de magnitud del riesgo.
"""
import csv
import io
import json
import logging
import math
from collections import OrderedDict, defaultdict, namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import stats

from ce import ce_estimate
from corpus import DIRECTIONS, check_direction
from errors import AdequacyError, ConfigurationError, DataError
from estimators import (CE_IS, GEN_IS, MC, METHODS, REF, estimate_from_record, estimate_to_record,
                        run_is, run_mc, run_reference)
from generalize import apply_generalized
from sampling import RngStream

logger = logging.getLogger(__name__)

RUNS_SCHEMA_VERSION = 1
CONVENTIONS = ('asset', 'grand')
# Réplicas de campaña: nueve por método salvo Gen-IS
DEFAULT_REPLICATES = '9,gen-is=5'

RunRecord = namedtuple('RunRecord', ['asset_id', 'method', 'direction', 'replicate', 'seed', 'estimate', 'error'],
                       defaults=(None,))

WelchResult = namedtuple('WelchResult', ['t', 'df', 'p'])

SpeedupRow = namedtuple('SpeedupRow', ['magnitude', 'method', 'direction', 'speedup', 'assets', 'estimates'])

SpeedupTable = namedtuple('SpeedupTable', ['rows', 'overall', 'convention'])


# ---------------------------------------------------------------------------
# Ejecución
# ---------------------------------------------------------------------------

def cell_stream(seed, asset_index, method, direction, replicate):
    """Flujo aleatorio reproducible de una celda de la campaña"""
    return RngStream(seed, (2, int(asset_index), METHODS.index(method), DIRECTIONS.index(direction),
                            int(replicate)))


def run_method(asset, corpus, method, direction, config, rng, gen_probs=None, workers=1):
    """Ejecuta un método de estimación con la configuración común"""
    check_direction(direction)
    if method == REF:
        return run_reference(asset, corpus, direction, config.beta_target, config.n_max, rng,
                             config.batch, workers)
    if method == MC:
        return run_mc(asset, corpus, direction, config.m, config.beta_target, config.n_max, rng,
                      config.batch, workers)
    if method == CE_IS:
        return ce_estimate(asset, corpus, direction, config, rng, workers)[0]
    if method == GEN_IS:
        gen = (gen_probs or {}).get(direction)
        if gen is None:
            raise ConfigurationError(f"Gen-IS requiere probabilidades generalizadas para '{direction}'")
        params = apply_generalized(asset, corpus, gen)
        return run_is(asset, corpus, params, config.m, config.beta_target, config.n_max, config.batch,
                      rng, workers, method=GEN_IS)
    raise ConfigurationError(f"Método desconocido: {method!r}")


def replicate_counts(methods, replicates):
    """
    Réplicas por método

    Args:
        replicates: entero común a todos los métodos o {método: réplicas}
    """
    if isinstance(replicates, (int, np.integer)):
        counts = {method: int(replicates) for method in methods}
    else:
        counts = dict(replicates)
        missing = [method for method in methods if method not in counts]
        if missing:
            raise ConfigurationError(f"Faltan réplicas para: {', '.join(missing)}")
    for method in methods:
        if int(counts[method]) < 1:
            raise ConfigurationError(f"Se requiere al menos una réplica de {method}")
    return OrderedDict((method, int(counts[method])) for method in methods)


def parse_replicates(text, methods):
    """Interpreta '9,gen-is=5': un entero común y excepciones por método"""
    common, counts = None, {}
    for item in filter(None, (part.strip() for part in text.split(','))):
        method, sep, value = item.rpartition('=')
        try:
            count = int(value)
        except ValueError:
            raise ConfigurationError(f"Réplicas inválidas: {item!r}")
        if not sep:
            common = count
        elif method not in METHODS:
            raise ConfigurationError(f"Método desconocido: {method!r}")
        else:
            counts[method] = count
    if common is not None:
        counts = {**{method: common for method in methods}, **counts}
    return replicate_counts(methods, counts)


def run_campaign(assets, corpus, methods, replicates, config, seed, directions=DIRECTIONS,
                 gen_probs=None, workers=1, auditoria=None):
    """
    Corre todas las celdas (activo, método, dirección, réplica)

    replicates es un entero común o un diccionario {método: réplicas}.
    Los fallos de una corrida se registran en su RunRecord y la campaña sigue.
    El resultado se ordena por celda, independiente del orden de ejecución.
    """
    for method in methods:
        if method not in METHODS:
            raise ConfigurationError(f"Método desconocido: {method!r}")
    for direction in directions:
        check_direction(direction)
    counts = replicate_counts(methods, replicates)

    cells = [(index, asset, method, direction, replicate)
             for index, asset in enumerate(assets)
             for method in methods
             for direction in directions
             for replicate in range(counts[method])]

    def run_cell(cell):
        index, asset, method, direction, replicate = cell
        stream = cell_stream(seed, index, method, direction, replicate)
        try:
            estimate = run_method(asset, corpus, method, direction, config, stream, gen_probs)
            return RunRecord(asset.asset_id, method, direction, replicate, seed, estimate)
        except AdequacyError as exc:
            logger.warning("Corrida %s/%s/%s/%d falló: %s", asset.asset_id, method, direction,
                           replicate, exc)
            return RunRecord(asset.asset_id, method, direction, replicate, seed, None, str(exc))

    logger.info("Campaña: %d celdas con %d workers", len(cells), workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            records = list(executor.map(run_cell, cells))
    else:
        records = [run_cell(cell) for cell in cells]

    records.sort(key=lambda r: (r.asset_id, METHODS.index(r.method), DIRECTIONS.index(r.direction),
                                r.replicate))
    if auditoria is not None:
        for record in records:
            auditoria.registrar_corrida(record_to_dict(record))
    return records


def record_to_dict(record):
    return {
        'schema_version': RUNS_SCHEMA_VERSION,
        'asset_id': record.asset_id,
        'method': record.method,
        'direction': record.direction,
        'replicate': int(record.replicate),
        'seed': int(record.seed),
        'estimate': estimate_to_record(record.estimate) if record.estimate is not None else None,
        'error': record.error,
    }


def record_from_dict(data):
    if data.get('schema_version') != RUNS_SCHEMA_VERSION:
        raise DataError(f"Versión de esquema de corridas no soportada: {data.get('schema_version')}")
    estimate = estimate_from_record(data['estimate']) if data.get('estimate') else None
    return RunRecord(data['asset_id'], data['method'], data['direction'], data['replicate'],
                     data['seed'], estimate, data.get('error'))


# ---------------------------------------------------------------------------
# Estadística
# ---------------------------------------------------------------------------

def welch_test(a, b):
    """
    Prueba t de Welch de dos colas

    Con varianza nula en ambos lados: medias iguales → t = 0, p = 1;
    medias distintas → p = 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ConfigurationError("La prueba de Welch requiere al menos dos réplicas por lado")
    var_a, var_b = np.var(a, ddof=1), np.var(b, ddof=1)
    se_a, se_b = var_a / a.size, var_b / b.size
    if se_a + se_b == 0.0:
        df = float(a.size + b.size - 2)
        if np.mean(a) == np.mean(b):
            return WelchResult(0.0, df, 1.0)
        return WelchResult(math.copysign(math.inf, np.mean(a) - np.mean(b)), df, 0.0)
    result = stats.ttest_ind(a, b, equal_var=False)
    df = (se_a + se_b) ** 2 / (se_a ** 2 / (a.size - 1) + se_b ** 2 / (b.size - 1))
    return WelchResult(float(result.statistic), float(df), float(result.pvalue))


def _group(records):
    groups = defaultdict(list)
    for r in records:
        if r.estimate is not None:
            groups[(r.asset_id, r.direction)].append(r)
    return groups


def campaign_risks(records):
    """
    Riesgo medio por (activo, dirección)

    Usa las corridas de referencia de la celda si existen; si no, todas
    las corridas con estimación.
    """
    refs = _group([r for r in records if r.method == REF])
    return {key: float(np.mean([r.estimate.r_hat for r in refs.get(key) or group]))
            for key, group in _group(records).items()}


def welch_filter(method_records, ref_records, significance=0.05):
    """
    Veredicto de exactitud por (activo, dirección, método)

    Returns:
        dict → True (exacto), False (inexacto) o None (réplicas insuficientes)
    """
    refs = _group(ref_records)
    cells = defaultdict(list)
    for r in method_records:
        if r.estimate is not None:
            cells[(r.asset_id, r.direction, r.method)].append(r.estimate.r_hat)
    verdicts = {}
    for (asset_id, direction, method), values in sorted(cells.items()):
        reference = [r.estimate.r_hat for r in refs.get((asset_id, direction), [])]
        if len(values) < 2 or len(reference) < 2:
            verdicts[(asset_id, direction, method)] = None
            continue
        verdicts[(asset_id, direction, method)] = welch_test(values, reference).p >= significance
    return verdicts


def extrapolate_time(elapsed, beta_current, beta_target):
    """Tiempo para alcanzar beta_target: elapsed·(β/β_objetivo)²"""
    if beta_current is None or beta_current <= beta_target:
        return elapsed
    return elapsed * (beta_current / beta_target) ** 2


def effective_time(estimate, beta_target):
    """Tiempo medido, extrapolado si la corrida no convergió"""
    if estimate.converged:
        return estimate.elapsed
    return extrapolate_time(estimate.elapsed, estimate.beta, beta_target)


def magnitude(r_hat):
    return int(math.floor(math.log10(r_hat)))


def speedup_report(records, significance=0.05, convention='asset', beta_target=0.1):
    """
    Tabla de aceleraciones t_ref / t_método por orden de magnitud

    Solo entran estimaciones no nulas de celdas exactas según Welch; las
    exclusiones se cuentan por motivo en el resumen.

    Returns:
        (SpeedupTable, resumen)
    """
    if convention not in CONVENTIONS:
        raise ConfigurationError(f"Convención inválida: {convention!r}")
    ref_records = [r for r in records if r.method == REF]
    method_records = [r for r in records if r.method != REF]
    if not ref_records:
        raise ConfigurationError("El reporte requiere corridas del método de referencia")

    excluded = OrderedDict((k, 0) for k in ('failed', 'zero', 'inaccurate', 'untested', 'no_reference'))
    verdicts = welch_filter(method_records, ref_records, significance)
    refs = _group(ref_records)

    # (activo, dirección, método) → estimaciones incluidas
    cells = defaultdict(list)
    for r in method_records:
        if r.estimate is None:
            excluded['failed'] += 1
            continue
        key = (r.asset_id, r.direction, r.method)
        ref_ok = [x.estimate for x in refs.get((r.asset_id, r.direction), [])]
        if r.estimate.zero_flagged or not r.estimate.r_hat > 0:
            excluded['zero'] += 1
        elif not ref_ok:
            excluded['no_reference'] += 1
        elif verdicts.get(key) is None:
            excluded['untested'] += 1
        elif not verdicts[key]:
            excluded['inaccurate'] += 1
        else:
            cells[key].append(r.estimate)

    groups = defaultdict(list)
    for (asset_id, direction, method), estimates in sorted(cells.items()):
        references = [x.estimate for x in refs[(asset_id, direction)]]
        t_ref = float(np.mean([effective_time(e, beta_target) for e in references]))
        t_method = float(np.mean([effective_time(e, beta_target) for e in estimates]))
        ref_mean = float(np.mean([e.r_hat for e in references]))
        level = ref_mean if ref_mean > 0 else float(np.mean([e.r_hat for e in estimates]))
        groups[(magnitude(level), method, direction)].append((t_ref, t_method, len(estimates)))

    def combine(entries):
        if convention == 'asset':
            ratios = [t_ref / t_method for t_ref, t_method, _ in entries if t_method > 0]
            return float(np.mean(ratios)) if ratios else math.nan
        t_method = np.mean([e[1] for e in entries])
        return float(np.mean([e[0] for e in entries]) / t_method) if t_method > 0 else math.nan

    rows = []
    pooled = defaultdict(list)
    for (level, method, direction), entries in sorted(groups.items(),
                                                      key=lambda item: (item[0][0], METHODS.index(item[0][1]),
                                                                        item[0][2])):
        rows.append(SpeedupRow(level, method, direction, combine(entries), len(entries),
                               sum(e[2] for e in entries)))
        pooled[(method, direction)].extend(entries)
    overall = [SpeedupRow(None, method, direction, combine(entries), len(entries), sum(e[2] for e in entries))
               for (method, direction), entries in sorted(pooled.items(),
                                                          key=lambda item: (METHODS.index(item[0][0]),
                                                                            item[0][1]))]

    summary = OrderedDict([
        ('records', len(records)),
        ('reference_records', len(ref_records)),
        ('included', sum(row.estimates for row in rows)),
        ('excluded', dict(excluded)),
        ('convention', convention),
        ('significance', significance),
    ])
    return SpeedupTable(rows, overall, convention), summary


# ---------------------------------------------------------------------------
# Presentación
# ---------------------------------------------------------------------------

def _row_dict(row):
    return {
        'magnitude': row.magnitude,
        'method': row.method,
        'direction': row.direction,
        'speedup': None if math.isnan(row.speedup) else row.speedup,
        'assets': row.assets,
        'estimates': row.estimates,
    }


def format_table(table, summary):
    """Tabla legible de aceleraciones"""
    lines = ["=" * 70, "ACELERACIÓN MEDIA t_ref / t_método POR ORDEN DE MAGNITUD", "=" * 70,
             f"{'magnitud':>10} {'método':>8} {'dir':>4} {'aceleración':>12} {'activos':>8} {'estim.':>7}"]
    for row in table.rows:
        lines.append(f"{'1e' + str(row.magnitude):>10} {row.method:>8} {row.direction:>4} "
                     f"{row.speedup:>12.2f} {row.assets:>8} {row.estimates:>7}")
    lines.append("-" * 70)
    for row in table.overall:
        lines.append(f"{'total':>10} {row.method:>8} {row.direction:>4} "
                     f"{row.speedup:>12.2f} {row.assets:>8} {row.estimates:>7}")
    lines.append("-" * 70)
    lines.append(f"Corridas: {summary['records']}  incluidas: {summary['included']}  "
                 f"convención: {summary['convention']}")
    excluded = ', '.join(f"{k}={v}" for k, v in summary['excluded'].items())
    lines.append(f"Excluidas: {excluded}")
    lines.append("=" * 70)
    return '\n'.join(lines)


def to_csv(table):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(['magnitude', 'method', 'direction', 'speedup', 'assets', 'estimates'])
    for row in list(table.rows) + list(table.overall):
        d = _row_dict(row)
        writer.writerow(['all' if d['magnitude'] is None else d['magnitude'], d['method'], d['direction'],
                         '' if d['speedup'] is None else repr(d['speedup']), d['assets'], d['estimates']])
    return buffer.getvalue()


def to_json(table, summary):
    return json.dumps({
        'rows': [_row_dict(r) for r in table.rows],
        'overall': [_row_dict(r) for r in table.overall],
        'summary': summary,
    }, indent=2, sort_keys=True)
