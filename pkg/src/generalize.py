"""
Distribución IS generalizada por bin (Gen-IS)

Promedia las probabilidades CE por cliente de muchos activos para obtener
una probabilidad spiky por bin, de modo que la etapa de optimización CE
pueda omitirse en activos nuevos.
"""
import glob
import json
import logging
import math
import os
from collections import OrderedDict, defaultdict, namedtuple

import numpy as np

from corpus import DIRECTIONS, check_direction
from errors import ConfigurationError, DataError
from sampling import initial_u, make_is_params

logger = logging.getLogger(__name__)

GEN_PROBS_SCHEMA_VERSION = 1
WEIGHTINGS = ('customer', 'asset')

CEResult = namedtuple('CEResult', ['asset_id', 'direction', 'bin_ids', 'v'])

GeneralizedBinProbs = namedtuple(
    'GeneralizedBinProbs',
    ['probs', 'direction', 'provenance', 'threshold', 'q_spiky', 'weighting'],
    defaults=(0.95, 'customer'),
)


def ce_result_from_asset(asset, trace):
    """CEResult a partir de un activo y su traza CE"""
    return CEResult(asset.asset_id, trace.direction, list(trace.bin_ids), np.asarray(trace.final_v))


def load_ce_results(directory):
    """
    Lee las líneas finales de todos los *.jsonl de trazas CE de un directorio
    """
    results = []
    paths = sorted(glob.glob(os.path.join(directory, '*.jsonl')))
    if not paths:
        raise DataError(f"No hay trazas CE en {directory}")
    for path in paths:
        with open(path, encoding='utf-8') as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{line_no}: JSON inválido ({exc})")
                if record.get('kind') != 'final':
                    continue
                if len(record['bin_ids']) != len(record['v']):
                    raise DataError(f"{path}:{line_no}: bin_ids y v de distinta longitud")
                results.append(CEResult(record['asset_id'], record['direction'], record['bin_ids'],
                                        np.asarray(record['v'], dtype=np.float64)))
    return results


def _bin_initial_u(bin_, direction):
    return bin_.spiky(direction).size / bin_.size


def derive_bin_probs(ce_results, corpus, max_customers=80, threshold=0.15, q_spiky=0.95,
                     weighting='customer', direction=None):
    """
    Probabilidad spiky por bin a partir de resultados CE

    Solo se usan activos con menos de max_customers clientes del grupo 1.
    Un bin cuya media supera threshold recibe esa media (reacotada a
    [1 − q_spiky, 0.9]); los demás bins reciben su u inicial.
    """
    if weighting not in WEIGHTINGS:
        raise ConfigurationError(f"Ponderación inválida: {weighting!r}")
    if direction is None:
        found = {r.direction for r in ce_results}
        if len(found) != 1:
            raise ConfigurationError("Indique la dirección: los resultados CE mezclan direcciones")
        direction = found.pop()
    check_direction(direction)

    selected = sorted((r for r in ce_results
                       if r.direction == direction and len(r.bin_ids) < max_customers),
                      key=lambda r: r.asset_id)
    if not selected:
        raise ConfigurationError("No quedan resultados CE tras el filtrado por número de clientes")

    # bin → lista de contribuciones (por cliente o por activo)
    contributions = defaultdict(list)
    for result in selected:
        per_asset = defaultdict(list)
        for bin_id, p in zip(result.bin_ids, result.v):
            per_asset[bin_id].append(float(p))
        for bin_id, values in sorted(per_asset.items()):
            if weighting == 'customer':
                contributions[bin_id].extend(values)
            else:
                contributions[bin_id].append(math.fsum(values) / len(values))

    probs = OrderedDict()
    for bin_id, b in corpus.bins.items():
        fallback = _bin_initial_u(b, direction)
        values = contributions.get(bin_id)
        if not values:
            logger.warning("Bin %s sin clientes en los resultados CE, se usa u inicial %.4f",
                           bin_id, fallback)
            probs[bin_id] = fallback
            continue
        mean = math.fsum(values) / len(values)
        probs[bin_id] = float(np.clip(mean, 1.0 - q_spiky, 0.9)) if mean > threshold else fallback

    unknown = set(contributions) - set(corpus.bins)
    if unknown:
        logger.warning("Resultados CE con bins ausentes del corpus: %s", ', '.join(sorted(unknown)))

    return GeneralizedBinProbs(probs, direction, [r.asset_id for r in selected], threshold,
                               q_spiky, weighting)


def apply_generalized(asset, corpus, gen):
    """Parámetros IS de un activo con v_i = gen[b_i]"""
    v = []
    for customer in asset.smart_meter_customers:
        if customer.bin_id not in gen.probs:
            raise DataError(f"La distribución generalizada no cubre el bin {customer.bin_id}")
        v.append(gen.probs[customer.bin_id])
    return make_is_params(initial_u(asset, corpus, gen.direction), v, gen.direction)


def save_gen_probs(gen, path):
    data = {
        'schema_version': GEN_PROBS_SCHEMA_VERSION,
        'direction': gen.direction,
        'threshold': gen.threshold,
        'q_spiky': gen.q_spiky,
        'weighting': gen.weighting,
        'provenance': list(gen.provenance),
        'probs': dict(gen.probs),
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)


def load_gen_probs(path):
    try:
        with open(path, encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"No se pudo leer {path}: {exc}")
    if data.get('schema_version') != GEN_PROBS_SCHEMA_VERSION:
        raise DataError(f"Versión de esquema no soportada en {path}")
    if data.get('direction') not in DIRECTIONS:
        raise DataError(f"Dirección inválida en {path}")
    return GeneralizedBinProbs(OrderedDict(sorted(data['probs'].items())), data['direction'],
                               data['provenance'], data['threshold'], data['q_spiky'], data['weighting'])
