"""
Modelo de demanda bottom-up de un activo de distribución

La demanda del activo es la suma de los perfiles de sus clientes:
perfiles de medidor inteligente escalados (grupo 1, aleatorios),
perfiles de telemetría (grupo 2) y perfiles promedio escalados (grupo 3).
Los grupos 2 y 3 son deterministas y se precalculan una sola vez.
"""
import json
import logging
from collections import namedtuple

import numpy as np

from corpus import POS, check_direction, quantile_bin
from errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

SMART_METER = 'smart_meter'
TELEMETRY = 'telemetry'
AVERAGE = 'average'
GROUPS = (SMART_METER, TELEMETRY, AVERAGE)

ASSETS_SCHEMA_VERSION = 1

# Elementos float32 reunidos por bloque al evaluar lotes de trazas
MAX_GATHER = 4_000_000

# Activos de una campaña sintética y rango de riesgo que deben cubrir
DEFAULT_ASSET_COUNT = 30
RISK_RANGE = (1e-8, 1e-1)

Customer = namedtuple('Customer', ['group', 'gamma', 'bin_id', 'telemetry_id', 'category_id'],
                      defaults=(None, None, None, None))


class Asset(namedtuple('Asset', ['asset_id', 'd_cap', 'customers'])):
    """Activo con capacidad nominal d_cap (kW) y su lista de clientes"""
    __slots__ = ()

    @property
    def smart_meter_customers(self):
        return [c for c in self.customers if c.group == SMART_METER]

    @property
    def n_s(self):
        return sum(1 for c in self.customers if c.group == SMART_METER)

    @property
    def n_l(self):
        return sum(1 for c in self.customers if c.group == TELEMETRY)

    @property
    def n_a(self):
        return sum(1 for c in self.customers if c.group == AVERAGE)


def smart_meter(gamma, bin_id):
    return Customer(SMART_METER, float(gamma), bin_id=bin_id)


def telemetry(telemetry_id):
    return Customer(TELEMETRY, telemetry_id=telemetry_id)


def average(gamma, category_id):
    return Customer(AVERAGE, float(gamma), category_id=category_id)


def validate_customer(customer):
    """Comprueba que el cliente tenga exactamente los campos de su grupo"""
    required = {
        SMART_METER: ('gamma', 'bin_id'),
        TELEMETRY: ('telemetry_id',),
        AVERAGE: ('gamma', 'category_id'),
    }
    if customer.group not in required:
        raise ConfigurationError(f"Grupo de cliente inválido: {customer.group!r}")
    for field in ('gamma', 'bin_id', 'telemetry_id', 'category_id'):
        is_set = getattr(customer, field) is not None
        if is_set != (field in required[customer.group]):
            raise ConfigurationError(f"Cliente {customer.group}: campo '{field}' mal especificado")
    if customer.gamma is not None and customer.gamma < 0:
        raise ConfigurationError("El consumo anual γ no puede ser negativo")


def validate_asset(asset):
    if not asset.d_cap > 0:
        raise ConfigurationError(f"Activo {asset.asset_id}: d_cap debe ser positivo")
    for customer in asset.customers:
        validate_customer(customer)


def signed(loads, direction):
    """Carga con signo: D para sobrecarga positiva, −D para negativa"""
    return loads if check_direction(direction) == POS else -loads


def exceedance_fraction(loads, threshold, inclusive=False):
    """Fracción de pasos (último eje) con carga > umbral (≥ si inclusive)"""
    hits = loads >= threshold if inclusive else loads > threshold
    return hits.mean(axis=-1)


class DemandModel:
    """
    Modelo de demanda precalculado para un activo

    Guarda la traza fija de los grupos 2 y 3, los consumos γ del grupo 1 y
    los desplazamientos de fila de sus bins dentro de la matriz apilada del
    corpus, de modo que cada traza solo suma perfiles del grupo 1.
    """

    def __init__(self, asset, corpus):
        validate_asset(asset)
        self.asset = asset
        self.corpus = corpus
        self.T = corpus.T

        fixed = np.zeros(self.T, dtype=np.float64)
        for customer in asset.customers:
            if customer.group == TELEMETRY:
                fixed += corpus.telemetry_profile(customer.telemetry_id)
            elif customer.group == AVERAGE:
                fixed += customer.gamma * corpus.average_profile(customer.category_id).astype(np.float64)
        self.fixed = fixed

        members = asset.smart_meter_customers
        self.bin_ids = [c.bin_id for c in members]
        bins = [corpus.bin(b) for b in self.bin_ids]
        self.gammas = np.array([c.gamma for c in members], dtype=np.float64)
        self.matrix, offsets = corpus.stacked()
        self.offsets = np.array([offsets[b] for b in self.bin_ids], dtype=np.int64)
        self.bin_sizes = np.array([b.size for b in bins], dtype=np.int64)

    @property
    def n_s(self):
        return self.gammas.size

    def rows(self, selection):
        """Filas globales de una selección de perfiles (índices base 0 por bin)"""
        selection = np.asarray(selection, dtype=np.int64)
        if selection.shape[-1] != self.n_s:
            raise ValueError(f"La selección tiene {selection.shape[-1]} elementos, se esperaban {self.n_s}")
        if np.any(selection < 0) or np.any(selection >= self.bin_sizes):
            raise ValueError("Índice de perfil fuera del rango del bin")
        return self.offsets + selection

    def _check_times(self, theta):
        theta = np.asarray(theta, dtype=np.int64)
        if theta.size == 0 or np.any(theta < 0) or np.any(theta >= self.T):
            raise ValueError("Pasos de tiempo fuera de rango")
        return theta

    def demand(self, selection, theta=None):
        """Demanda D_t (kW) de una selección en los pasos theta (todo el año si None)"""
        rows = self.rows(selection)
        if theta is None:
            block = self.matrix[rows].astype(np.float64)
            return self.fixed + self.gammas @ block
        theta = self._check_times(theta)
        block = self.matrix[np.ix_(rows, theta)].astype(np.float64)
        return self.fixed[theta] + self.gammas @ block

    def signed_loads(self, rows, thetas, direction):
        """
        Cargas con signo para un lote de trazas

        Args:
            rows: filas globales (b, n_s)
            thetas: pasos (b, m) o None para el año completo

        Returns:
            Matriz (b, m) o (b, T) en float64
        """
        rows = np.asarray(rows, dtype=np.int64)
        n_traces = rows.shape[0]
        width = self.T if thetas is None else thetas.shape[1]
        out = np.empty((n_traces, width), dtype=np.float64)
        chunk = max(1, MAX_GATHER // max(1, self.n_s * width))
        for start in range(0, n_traces, chunk):
            stop = min(start + chunk, n_traces)
            r = rows[start:stop]
            if thetas is None:
                block = self.matrix[r]
                base = self.fixed
            else:
                th = thetas[start:stop]
                block = self.matrix[r[:, :, None], th[:, None, :]]
                base = self.fixed[th]
            out[start:stop] = base + np.einsum('i,cit->ct', self.gammas, block.astype(np.float64))
        return signed(out, direction)

    def full_year_max_loads(self, rows, direction):
        """Máxima carga con signo de cada traza sobre el año completo"""
        rows = np.asarray(rows, dtype=np.int64)
        chunk = max(1, MAX_GATHER // max(1, self.n_s * self.T))
        maxima = np.empty(rows.shape[0], dtype=np.float64)
        for start in range(0, rows.shape[0], chunk):
            stop = min(start + chunk, rows.shape[0])
            maxima[start:stop] = self.signed_loads(rows[start:stop], None, direction).max(axis=1)
        return maxima

    def expected_demand(self):
        """Traza esperada bajo selección uniforme (media de cada bin)"""
        trace = self.fixed.copy()
        for gamma, offset, size in zip(self.gammas, self.offsets, self.bin_sizes):
            trace += gamma * self.matrix[offset:offset + size].astype(np.float64).mean(axis=0)
        return trace


def evaluate_demand(asset, corpus, selection, theta):
    """Demanda del activo en los pasos theta para una selección de perfiles"""
    return DemandModel(asset, corpus).demand(selection, theta)


def max_load(asset, corpus, selection, theta=None, direction=POS):
    """Máxima carga con signo sobre theta (año completo si theta es None)"""
    return float(np.max(signed(DemandModel(asset, corpus).demand(selection, theta), direction)))


def impact(asset, corpus, selection, theta, threshold, direction=POS):
    """Fracción de pasos muestreados en sobrecarga respecto al umbral"""
    loads = signed(DemandModel(asset, corpus).demand(selection, theta), direction)
    return float(exceedance_fraction(loads, threshold))


# ---------------------------------------------------------------------------
# Definición de activos
# ---------------------------------------------------------------------------

def assign_customer_bins(corpus, category_id, gammas):
    """Agrupa por cuantiles los consumos de los clientes en los bins de su categoría"""
    bins = corpus.category_bins(category_id)
    if len(gammas) == 0:
        return []
    if len(gammas) >= len(bins):
        return [bins[b].bin_id for b in quantile_bin(gammas, len(bins))]
    # Pocos clientes: se ubica cada uno por el rango de consumo de los bins
    uppers = np.array([b.consumption_range[1] for b in bins])
    positions = np.minimum(np.searchsorted(uppers, gammas), len(bins) - 1)
    return [bins[p].bin_id for p in positions]


def design_assets(corpus, count=DEFAULT_ASSET_COUNT, min_customers=5, max_customers=120, seed=0,
                  headroom=(1.0, 2.5), max_telemetry=1, max_average=3):
    """
    Diseña activos sintéticos con holguras de capacidad repartidas

    d_cap = holgura × pico de la demanda esperada; las holguras recorren
    el intervalo dado en escala logarítmica para cubrir varios órdenes de
    magnitud de probabilidad de sobrecarga.
    """
    if count < 1 or not 1 <= min_customers <= max_customers:
        raise ConfigurationError("Parámetros de diseño de activos inválidos")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) % (1 << 64), spawn_key=(2,)))
    factors = np.geomspace(headroom[0], headroom[1], count)
    sizes = np.unique(np.geomspace(min_customers, max_customers, count).round().astype(int))
    telemetry_ids = list(corpus.telemetry_profiles)
    assets = []
    for k in range(count):
        n_s = int(sizes[k % sizes.size])
        by_category = {}
        for _ in range(n_s):
            category_id = corpus.categories[rng.integers(len(corpus.categories))]
            low = min(b.consumption_range[0] for b in corpus.category_bins(category_id))
            high = max(b.consumption_range[1] for b in corpus.category_bins(category_id))
            by_category.setdefault(category_id, []).append(float(rng.uniform(low, high)))
        customers = []
        for category_id, gammas in by_category.items():
            bin_ids = assign_customer_bins(corpus, category_id, gammas)
            customers.extend(smart_meter(g, b) for g, b in zip(gammas, bin_ids))
        if telemetry_ids and max_telemetry:
            for _ in range(rng.integers(0, max_telemetry + 1)):
                customers.append(telemetry(telemetry_ids[rng.integers(len(telemetry_ids))]))
        if corpus.average_categories and max_average:
            for _ in range(rng.integers(0, max_average + 1)):
                category_id = corpus.average_categories[rng.integers(len(corpus.average_categories))]
                customers.append(average(rng.uniform(1000.0, 20000.0), category_id))
        draft = Asset(f"asset-{k:03d}", 1.0, customers)
        peak = float(np.max(np.abs(DemandModel(draft, corpus).expected_demand())))
        assets.append(draft._replace(d_cap=round(factors[k] * max(peak, 1e-6), 6)))
    return assets


def risk_out_of_range(risks, low=RISK_RANGE[0], high=RISK_RANGE[1]):
    """
    Activos cuyo riesgo exacto o estimado cae fuera de [low, high]

    Args:
        risks: {(asset_id, dirección): riesgo}

    Returns:
        Lista ordenada de (asset_id, dirección, riesgo)
    """
    outside = []
    for (asset_id, direction), risk in sorted(risks.items()):
        risk = float(risk)
        if not low <= risk <= high:
            logger.warning("Activo %s (%s): riesgo %.3e fuera de [%.0e, %.0e]", asset_id, direction,
                           risk, low, high)
            outside.append((asset_id, direction, risk))
    return outside


def asset_to_dict(asset):
    return {
        'asset_id': asset.asset_id,
        'd_cap': asset.d_cap,
        'customers': [{k: v for k, v in c._asdict().items() if v is not None} for c in asset.customers],
    }


def asset_from_dict(data):
    try:
        customers = [Customer(**c) for c in data['customers']]
        asset = Asset(str(data['asset_id']), float(data['d_cap']), customers)
    except (KeyError, TypeError) as e:
        raise ConfigurationError(f"Definición de activo inválida: {e}")
    validate_asset(asset)
    return asset


def save_assets(assets, path):
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump({'schema_version': ASSETS_SCHEMA_VERSION,
                   'assets': [asset_to_dict(a) for a in assets]}, fh, indent=2)


def load_assets(path):
    try:
        with open(path, encoding='utf-8') as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"No existe el archivo de activos {path}")
    assets = [asset_from_dict(a) for a in data.get('assets', [])]
    ids = [a.asset_id for a in assets]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("Identificadores de activo repetidos")
    return assets


def find_asset(assets, asset_id):
    for asset in assets:
        if asset.asset_id == asset_id:
            return asset
    raise DataError(f"Activo desconocido: {asset_id}")


def validate_assets(assets, corpus):
    """
    Verifica la integridad referencial de los activos contra un corpus

    Returns:
        Lista de (asset_id, mensaje) con los problemas encontrados
    """
    problems = []
    for asset in assets:
        try:
            validate_asset(asset)
        except ConfigurationError as e:
            problems.append((asset.asset_id, str(e)))
            continue
        for customer in asset.customers:
            if customer.group == SMART_METER and customer.bin_id not in corpus.bins:
                problems.append((asset.asset_id, f"Bin desconocido: {customer.bin_id}"))
            elif customer.group == TELEMETRY and customer.telemetry_id not in corpus.telemetry_profiles:
                problems.append((asset.asset_id, f"Telemetría desconocida: {customer.telemetry_id}"))
            elif customer.group == AVERAGE and customer.category_id not in corpus.average_profiles:
                problems.append((asset.asset_id, f"Perfil promedio desconocido: {customer.category_id}"))
    return problems
