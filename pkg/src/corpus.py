"""
Corpus de perfiles de medidores inteligentes

Genera un corpus sintético (sustituto de las mediciones reales), agrupa los
perfiles en bins por cuantiles de consumo anual y clasifica cada bin en
conjuntos 'spiky' y 'smooth' para ambas direcciones de sobrecarga.
"""
import json
import logging
import math
from collections import namedtuple, OrderedDict
from pathlib import Path

import numpy as np

from errors import ConfigurationError, DataError, StateError

logger = logging.getLogger(__name__)

POS = 'pos'
NEG = 'neg'
DIRECTIONS = (POS, NEG)

DT_HOURS = 0.25
STEPS_PER_DAY = 96
STEPS_PER_YEAR = 35040
CORPUS_SCHEMA_VERSION = 1

Profile = namedtuple('Profile', ['id', 'values'])

CategorySpec = namedtuple(
    'CategorySpec',
    ['category_id', 'n_bins', 'profiles_per_bin', 'gamma_median', 'gamma_sigma'],
    defaults=(2, 60, 3500.0, 0.4),
)

CorpusSpec = namedtuple(
    'CorpusSpec',
    ['categories', 'T', 'average_categories', 'n_telemetry', 'telemetry_kw',
     'spike_fraction', 'spike_count', 'spike_shape', 'spike_scale', 'spike_duration',
     'noise_sigma', 'pv_fraction', 'pv_share',
     'min_bins', 'max_bins', 'min_profiles_per_bin', 'q_spiky'],
    defaults=(STEPS_PER_YEAR, (), 0, 50.0,
              0.05, 6, 2.5, 6.0, 2,
              0.25, 0.2, 0.5,
              2, 4, 50, 0.95),
)


def check_direction(direction):
    """Valida la dirección de sobrecarga ('pos' o 'neg')"""
    if direction not in DIRECTIONS:
        raise ConfigurationError(f"Dirección inválida: {direction!r} (use 'pos' o 'neg')")
    return direction


class Bin(namedtuple('Bin', ['bin_id', 'category_id', 'profiles', 'profile_ids',
                             'spiky_plus', 'spiky_minus', 'consumption_range', 'injected'])):
    """
    Bin de perfiles normalizados de una categoría

    profiles es una matriz (n_b, T) en float32; spiky_plus y spiky_minus son
    arreglos de índices (None mientras el bin no esté clasificado).
    """
    __slots__ = ()

    @property
    def size(self):
        return int(self.profiles.shape[0])

    def spiky(self, direction):
        indices = self.spiky_plus if check_direction(direction) == POS else self.spiky_minus
        if indices is None:
            raise StateError(f"Bin {self.bin_id} no clasificado para dirección {direction}")
        return indices

    def smooth(self, direction):
        mask = np.ones(self.size, dtype=bool)
        mask[self.spiky(direction)] = False
        return np.flatnonzero(mask)

    def profile(self, index):
        profile_id = self.profile_ids[index] if self.profile_ids is not None else f"{self.bin_id}/{index}"
        return Profile(profile_id, self.profiles[index])


def make_bin(bin_id, category_id, profiles, profile_ids=None, spiky_plus=None, spiky_minus=None,
             consumption_range=(0.0, 0.0), injected=None):
    """Construye un Bin convirtiendo los perfiles a float32"""
    matrix = np.atleast_2d(np.asarray(profiles, dtype=np.float32))
    if matrix.shape[0] == 0:
        raise DataError(f"El bin {bin_id} no tiene perfiles")
    if profile_ids is None:
        profile_ids = [f"{bin_id}/{i}" for i in range(matrix.shape[0])]
    as_index = lambda s: None if s is None else np.asarray(sorted(s), dtype=np.int64)
    injected = np.zeros(matrix.shape[0], dtype=bool) if injected is None else np.asarray(injected, dtype=bool)
    return Bin(bin_id, category_id, matrix, list(profile_ids), as_index(spiky_plus), as_index(spiky_minus),
               (float(consumption_range[0]), float(consumption_range[1])), injected)


class Corpus:
    """
    Corpus inmutable: categorías → bins → perfiles

    Además de los bins del grupo 1 guarda los perfiles promedio por categoría
    (grupo 3, normalizados) y los perfiles de telemetría (grupo 2, en kW).
    """

    def __init__(self, bins, T, categories=None, average_profiles=None, telemetry_profiles=None,
                 seed=None, q_spiky=None):
        self.T = int(T)
        self.bins = OrderedDict((b.bin_id, b) for b in bins)
        if categories is None:
            categories = list(OrderedDict.fromkeys(b.category_id for b in self.bins.values()))
        self.categories = list(categories)
        self.average_profiles = {k: np.asarray(v, dtype=np.float32) for k, v in (average_profiles or {}).items()}
        self.telemetry_profiles = {k: np.asarray(v, dtype=np.float32) for k, v in (telemetry_profiles or {}).items()}
        self.seed = seed
        self.q_spiky = q_spiky
        self._stacked = None

        if self.T < 1:
            raise DataError("T debe ser al menos 1")
        for b in self.bins.values():
            if b.profiles.shape[1] != self.T:
                raise DataError(f"Bin {b.bin_id}: perfiles de longitud {b.profiles.shape[1]}, se esperaba {self.T}")
            if not np.all(np.isfinite(b.profiles)):
                raise DataError(f"Bin {b.bin_id}: valores no finitos")
        for name, table in (('promedio', self.average_profiles), ('telemetría', self.telemetry_profiles)):
            for key, values in table.items():
                if values.shape != (self.T,):
                    raise DataError(f"Perfil de {name} {key}: longitud incorrecta")

    @property
    def average_categories(self):
        return list(self.average_profiles)

    def bin(self, bin_id):
        try:
            return self.bins[bin_id]
        except KeyError:
            raise DataError(f"Bin desconocido: {bin_id}")

    def category_bins(self, category_id):
        """Bins de una categoría en orden de consumo creciente"""
        found = [b for b in self.bins.values() if b.category_id == category_id]
        if not found:
            raise DataError(f"Categoría sin bins: {category_id}")
        return found

    def average_profile(self, category_id):
        if category_id not in self.average_profiles:
            raise DataError(f"Perfil promedio desconocido: {category_id}")
        return self.average_profiles[category_id]

    def telemetry_profile(self, telemetry_id):
        if telemetry_id not in self.telemetry_profiles:
            raise DataError(f"Perfil de telemetría desconocido: {telemetry_id}")
        return self.telemetry_profiles[telemetry_id]

    def is_classified(self, direction):
        attr = 'spiky_plus' if check_direction(direction) == POS else 'spiky_minus'
        return all(getattr(b, attr) is not None for b in self.bins.values())

    def stacked(self):
        """Matriz (N, T) con todos los perfiles y el desplazamiento de fila de cada bin"""
        if self._stacked is None:
            offsets = {}
            start = 0
            for bin_id, b in self.bins.items():
                offsets[bin_id] = start
                start += b.size
            matrix = np.concatenate([b.profiles for b in self.bins.values()], axis=0) if self.bins \
                else np.zeros((0, self.T), dtype=np.float32)
            self._stacked = (matrix, offsets)
        return self._stacked

    def with_bins(self, bins, q_spiky=None):
        """Copia del corpus con otros bins (p. ej. reclasificados)"""
        return Corpus(bins, self.T, self.categories, self.average_profiles, self.telemetry_profiles,
                      self.seed, self.q_spiky if q_spiky is None else q_spiky)

    def __repr__(self):
        n_profiles = sum(b.size for b in self.bins.values())
        return f"Corpus(bins={len(self.bins)}, perfiles={n_profiles}, T={self.T})"


# ---------------------------------------------------------------------------
# Especificación de síntesis
# ---------------------------------------------------------------------------

def corpus_spec_from_dict(data):
    """Construye un CorpusSpec desde un diccionario (p. ej. JSON)"""
    data = dict(data)
    try:
        categories = tuple(CategorySpec(**c) for c in data.pop('categories'))
    except KeyError:
        raise ConfigurationError("La especificación requiere 'categories'")
    except TypeError as e:
        raise ConfigurationError(f"Categoría inválida: {e}")
    unknown = set(data) - set(CorpusSpec._fields)
    if unknown:
        raise ConfigurationError(f"Campos desconocidos en la especificación: {sorted(unknown)}")
    if 'average_categories' in data:
        data['average_categories'] = tuple(data['average_categories'])
    spec = CorpusSpec(categories=categories, **data)
    validate_corpus_spec(spec)
    return spec


def load_corpus_spec(path):
    with open(path, encoding='utf-8') as fh:
        return corpus_spec_from_dict(json.load(fh))


def validate_corpus_spec(spec):
    """Lanza ConfigurationError si la especificación no es válida"""
    if spec.T < 1:
        raise ConfigurationError("T debe ser al menos 1")
    if not spec.categories:
        raise ConfigurationError("La especificación no tiene categorías")
    ids = [c.category_id for c in spec.categories] + list(spec.average_categories)
    if len(set(ids)) != len(ids):
        raise ConfigurationError("Identificadores de categoría repetidos")
    for cat in spec.categories:
        if cat.profiles_per_bin < 1:
            raise ConfigurationError(f"Categoría {cat.category_id}: cero perfiles")
        if not spec.min_bins <= cat.n_bins <= spec.max_bins:
            raise ConfigurationError(
                f"Categoría {cat.category_id}: {cat.n_bins} bins fuera de [{spec.min_bins}, {spec.max_bins}]")
        if cat.profiles_per_bin < spec.min_profiles_per_bin:
            raise ConfigurationError(
                f"Categoría {cat.category_id}: {cat.profiles_per_bin} perfiles por bin "
                f"(mínimo {spec.min_profiles_per_bin})")
        if cat.gamma_median <= 0 or cat.gamma_sigma < 0:
            raise ConfigurationError(f"Categoría {cat.category_id}: parámetros de consumo inválidos")
    if not 0.0 <= spec.spike_fraction <= 1.0:
        raise ConfigurationError("spike_fraction debe estar en [0, 1]")
    if not 0.0 <= spec.pv_fraction <= 1.0:
        raise ConfigurationError("pv_fraction debe estar en [0, 1]")
    if not 0.0 <= spec.pv_share < 0.9:
        raise ConfigurationError("pv_share debe estar en [0, 0.9)")
    if spec.spike_shape <= 0 or spec.spike_scale < 0 or spec.spike_count < 0 or spec.spike_duration < 1:
        raise ConfigurationError("Parámetros de picos inválidos")
    if spec.n_telemetry < 0 or spec.noise_sigma < 0:
        raise ConfigurationError("Parámetros de telemetría o ruido inválidos")
    if not 0.0 < spec.q_spiky < 1.0:
        raise ConfigurationError("q_spiky debe estar en (0, 1)")


# ---------------------------------------------------------------------------
# Síntesis
# ---------------------------------------------------------------------------

def _seed_entropy(seed):
    return int(seed) % (1 << 64)


def _base_shape(rng, t):
    day = 2.0 * np.pi * t / STEPS_PER_DAY
    shape = (1.0
             + rng.uniform(0.3, 0.8) * np.sin(day - rng.uniform(0.0, 2.0 * np.pi))
             + 0.15 * np.sin(day / 7.0 + rng.uniform(0.0, 2.0 * np.pi))
             + 0.3 * np.cos(2.0 * np.pi * t / STEPS_PER_YEAR))
    return np.clip(shape, 0.05, None)


def _solar_shape(t):
    step = t % STEPS_PER_DAY
    return np.clip(np.sin(np.pi * (step - STEPS_PER_DAY / 4) / (STEPS_PER_DAY / 2)), 0.0, None)


def _synthesize_profile(rng, t, spec, injected, with_pv):
    shape = _base_shape(rng, t)
    values = shape * rng.lognormal(0.0, spec.noise_sigma, t.size) if spec.noise_sigma > 0 else shape.copy()
    if injected and spec.spike_count > 0:
        positions = rng.integers(0, t.size, spec.spike_count)
        magnitudes = spec.spike_scale * (1.0 + rng.pareto(spec.spike_shape, spec.spike_count)) * shape.mean()
        for offset in range(spec.spike_duration):
            np.add.at(values, (positions + offset) % t.size, magnitudes)
    if with_pv:
        solar = _solar_shape(t)
        if solar.sum() > 0:
            values = values - solar * (spec.pv_share * shape.sum() / solar.sum())
    return values / (values.sum() * DT_HOURS)


def synthesize_corpus(spec, seed):
    """
    Genera un corpus sintético determinista para (spec, seed)

    Cada categoría sortea consumos anuales log-normales, los agrupa por
    cuantiles en n_bins bins y genera un perfil normalizado por consumidor:
    base diaria/semanal/estacional + ruido + picos Pareto en una fracción
    fija de perfiles + componente opcional de exportación FV.

    Returns:
        Corpus clasificado con spec.q_spiky
    """
    validate_corpus_spec(spec)
    entropy = _seed_entropy(seed)
    t = np.arange(spec.T, dtype=np.float64)
    bins = []

    for ci, cat in enumerate(spec.categories):
        rng = np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=(0, ci)))
        n_total = cat.n_bins * cat.profiles_per_bin
        gammas = cat.gamma_median * np.exp(cat.gamma_sigma * rng.standard_normal(n_total))
        assignment = np.asarray(quantile_bin(gammas, cat.n_bins))

        for b in range(cat.n_bins):
            members = np.flatnonzero(assignment == b)
            n_spiky = int(round(spec.spike_fraction * members.size))
            injected = np.zeros(members.size, dtype=bool)
            injected[rng.permutation(members.size)[:n_spiky]] = True
            with_pv = rng.random(members.size) < spec.pv_fraction
            profiles = [_synthesize_profile(rng, t, spec, injected[k], with_pv[k]) for k in range(members.size)]
            bin_id = f"{cat.category_id}-b{b}"
            bins.append(make_bin(
                bin_id, cat.category_id, profiles,
                profile_ids=[f"{bin_id}/{k}" for k in range(members.size)],
                consumption_range=(gammas[members].min(), gammas[members].max()),
                injected=injected,
            ))

    rng = np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=(1,)))
    average_profiles = {}
    for category_id in spec.average_categories:
        shapes = np.mean([_base_shape(rng, t) for _ in range(50)], axis=0)
        average_profiles[category_id] = shapes / (shapes.sum() * DT_HOURS)
    telemetry_profiles = {}
    for k in range(spec.n_telemetry):
        shape = _base_shape(rng, t) * rng.lognormal(0.0, spec.noise_sigma, spec.T)
        telemetry_profiles[f"tel-{k:03d}"] = spec.telemetry_kw * shape / shape.mean()

    corpus = Corpus(bins, spec.T, [c.category_id for c in spec.categories],
                    average_profiles, telemetry_profiles, seed=seed)
    corpus = classify_corpus(corpus, spec.q_spiky)
    logger.info("Corpus sintetizado: %r", corpus)
    return corpus


# ---------------------------------------------------------------------------
# Binning, perfiles medianos y clasificación
# ---------------------------------------------------------------------------

def quantile_bin(consumptions, n_bins):
    """
    Asigna cada consumo anual a un bin por cuantiles

    Los tamaños difieren en a lo sumo 1 (los primeros bins reciben el
    sobrante) y los empates se resuelven por orden de entrada.
    """
    values = np.asarray(consumptions, dtype=np.float64)
    if values.size == 0:
        raise ConfigurationError("No hay consumos para agrupar")
    if n_bins < 1 or n_bins > values.size:
        raise ConfigurationError(f"n_bins={n_bins} inválido para {values.size} valores")
    order = np.argsort(values, kind='stable')
    assignment = np.empty(values.size, dtype=np.int64)
    for b, chunk in enumerate(np.array_split(order, n_bins)):
        assignment[chunk] = b
    return assignment.tolist()


def median_profile(bin_):
    """Perfil mediano por paso de tiempo (media de los dos centrales si n es par)"""
    if bin_.size == 0:
        raise DataError(f"Bin vacío: {bin_.bin_id}")
    return Profile(f"{bin_.bin_id}/median", np.median(bin_.profiles.astype(np.float64), axis=0))


def _values(profile):
    values = profile.values if isinstance(profile, Profile) else profile
    return np.asarray(values, dtype=np.float64)


def _deviation(profile, median):
    s, m = _values(profile), _values(median)
    if s.shape[-1] != m.shape[-1]:
        raise ValueError(f"Longitudes distintas: {s.shape[-1]} vs {m.shape[-1]}")
    return s - m


def delta_plus(profile, median):
    """Suma de desviaciones cuadráticas donde el perfil supera a la mediana"""
    diff = _deviation(profile, median)
    return float(np.sum(np.square(np.where(diff > 0, diff, 0.0)), axis=-1))


def delta_minus(profile, median):
    """Suma de desviaciones cuadráticas donde el perfil queda bajo la mediana"""
    diff = _deviation(profile, median)
    return float(np.sum(np.square(np.where(diff < 0, diff, 0.0)), axis=-1))


def _bin_deltas(bin_, direction):
    diff = bin_.profiles.astype(np.float64) - median_profile(bin_).values
    kept = diff > 0 if direction == POS else diff < 0
    return np.sum(np.square(np.where(kept, diff, 0.0)), axis=1)


def spiky_count(n, q_spiky):
    """Número nominal de perfiles spiky: ⌈(1 − q_spiky)·n⌉, al menos 1"""
    return max(1, math.ceil(round((1.0 - q_spiky) * n, 9)))


def empirical_quantile(values, p):
    """Cuantil empírico: elemento ⌈p·n⌉ (base 1) de los valores ordenados"""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    if ordered.size == 0:
        raise ValueError("No hay valores para el cuantil")
    index = math.ceil(round(p * ordered.size, 9)) - 1
    return float(ordered[min(max(index, 0), ordered.size - 1)])


def classify_spiky(bin_, q_spiky, direction):
    """
    Índices de los perfiles spiky de un bin para una dirección

    Un perfil es spiky si su métrica Δ es ≥ al umbral que deja
    ⌈(1 − q_spiky)·n⌉ perfiles por encima; los empates en el umbral se
    incluyen todos.
    """
    check_direction(direction)
    if not 0.0 < q_spiky < 1.0:
        raise ConfigurationError("q_spiky debe estar en (0, 1)")
    if bin_.size == 0:
        raise DataError(f"Bin vacío: {bin_.bin_id}")
    deltas = _bin_deltas(bin_, direction)
    if np.all(deltas == deltas[0]):
        logger.warning("Bin %s (%s): todas las métricas Δ son iguales, todo el bin es spiky",
                       bin_.bin_id, direction)
        return np.arange(bin_.size, dtype=np.int64)
    k = spiky_count(bin_.size, q_spiky)
    threshold = np.sort(deltas)[bin_.size - k]
    selected = np.flatnonzero(deltas >= threshold)
    if selected.size == bin_.size:
        logger.warning("Bin %s (%s): empates dejan el conjunto smooth vacío", bin_.bin_id, direction)
    return selected


def classify_bin(bin_, q_spiky):
    """Copia del bin con los conjuntos spiky de ambas direcciones"""
    return bin_._replace(spiky_plus=classify_spiky(bin_, q_spiky, POS),
                         spiky_minus=classify_spiky(bin_, q_spiky, NEG))


def classify_corpus(corpus, q_spiky):
    return corpus.with_bins([classify_bin(b, q_spiky) for b in corpus.bins.values()], q_spiky=q_spiky)


def profile_energy(profile):
    """Energía anual del perfil en kWh"""
    return float(np.sum(_values(profile)) * DT_HOURS)


def scale_profile(profile, gamma):
    """Escala un perfil normalizado al consumo anual gamma (kWh)"""
    if gamma < 0:
        raise ValueError("El consumo anual no puede ser negativo")
    profile_id = profile.id if isinstance(profile, Profile) else None
    return Profile(profile_id, _values(profile) * float(gamma))


def check_corpus_invariants(corpus, min_bins=2, max_bins=4, min_profiles=50):
    """Lista de violaciones de los invariantes del corpus (vacía si todo está bien)"""
    problems = []
    for category_id in corpus.categories:
        n = len([b for b in corpus.bins.values() if b.category_id == category_id])
        if not min_bins <= n <= max_bins:
            problems.append(f"Categoría {category_id}: {n} bins")
    for b in corpus.bins.values():
        if b.size < min_profiles:
            problems.append(f"Bin {b.bin_id}: {b.size} perfiles")
        for direction in DIRECTIONS:
            spiky = b.spiky_plus if direction == POS else b.spiky_minus
            if spiky is None:
                problems.append(f"Bin {b.bin_id}: sin clasificar ({direction})")
            elif spiky.size == 0:
                problems.append(f"Bin {b.bin_id}: conjunto spiky vacío ({direction})")
    return problems


# ---------------------------------------------------------------------------
# Persistencia
# ---------------------------------------------------------------------------

def _write_matrix(path, matrix):
    np.ascontiguousarray(matrix, dtype='<f4').tofile(path)


def _read_matrix(path, rows, T):
    data = np.fromfile(path, dtype='<f4')
    if data.size != rows * T:
        raise DataError(f"{path}: se esperaban {rows * T} valores, hay {data.size}")
    return data.reshape(rows, T).astype(np.float32)


def save_corpus(corpus, out_dir):
    """Escribe corpus.json y un archivo binario float32 por bin"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bins_meta = []
    for index, b in enumerate(corpus.bins.values()):
        filename = f"bin_{index:03d}.f32"
        _write_matrix(out / filename, b.profiles)
        bins_meta.append({
            'bin_id': b.bin_id,
            'category_id': b.category_id,
            'file': filename,
            'n_profiles': b.size,
            'profile_ids': list(b.profile_ids),
            'spiky_plus': None if b.spiky_plus is None else b.spiky_plus.tolist(),
            'spiky_minus': None if b.spiky_minus is None else b.spiky_minus.tolist(),
            'consumption_range': list(b.consumption_range),
            'injected': b.injected.tolist(),
        })
    extras = {}
    for name, table in (('average', corpus.average_profiles), ('telemetry', corpus.telemetry_profiles)):
        ids = list(table)
        if ids:
            _write_matrix(out / f"{name}.f32", np.stack([table[k] for k in ids]))
        extras[f"{name}_profiles"] = {'file': f"{name}.f32" if ids else None, 'ids': ids}
    meta = {
        'schema_version': CORPUS_SCHEMA_VERSION,
        'T': corpus.T,
        'seed': corpus.seed,
        'q_spiky': corpus.q_spiky,
        'dt_hours': DT_HOURS,
        'categories': corpus.categories,
        'bins': bins_meta,
        **extras,
    }
    with open(out / 'corpus.json', 'w', encoding='utf-8') as fh:
        json.dump(meta, fh, indent=2)
    return out


def load_corpus(directory):
    """Lee un corpus escrito por save_corpus"""
    base = Path(directory)
    try:
        with open(base / 'corpus.json', encoding='utf-8') as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"No existe {base / 'corpus.json'}")
    if meta.get('schema_version') != CORPUS_SCHEMA_VERSION:
        raise DataError(f"Versión de esquema no soportada: {meta.get('schema_version')}")
    T = int(meta['T'])
    bins = []
    for entry in meta['bins']:
        profiles = _read_matrix(base / entry['file'], entry['n_profiles'], T)
        bins.append(make_bin(entry['bin_id'], entry['category_id'], profiles,
                             profile_ids=entry['profile_ids'],
                             spiky_plus=entry['spiky_plus'], spiky_minus=entry['spiky_minus'],
                             consumption_range=entry['consumption_range'],
                             injected=entry['injected']))
    tables = {}
    for name in ('average', 'telemetry'):
        info = meta.get(f"{name}_profiles") or {'file': None, 'ids': []}
        if info['ids']:
            matrix = _read_matrix(base / info['file'], len(info['ids']), T)
            tables[name] = dict(zip(info['ids'], matrix))
        else:
            tables[name] = {}
    return Corpus(bins, T, meta['categories'], tables['average'], tables['telemetry'],
                  seed=meta.get('seed'), q_spiky=meta.get('q_spiky'))
