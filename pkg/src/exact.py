"""Oráculos exactos por enumeración con aritmética racional de gmpy2"""
import itertools

import gmpy2
import numpy as np

from corpus import check_direction
from demand import DemandModel
from errors import ConfigurationError, EliteSetEmptyError, StateError

# Selecciones evaluadas por bloque y límite total de la enumeración
CHUNK = 4096
MAX_SELECTIONS = 5_000_000


def _rational(p):
    """Racional exacto de un float o racional"""
    return gmpy2.mpq(p)


def _count_overloads(model, candidates, direction):
    """
    Cuenta pares (selección, paso) con carga > d_cap

    Args:
        candidates: por cliente, filas globales admisibles
    """
    total = 1
    for rows in candidates:
        total *= len(rows)
    if total > MAX_SELECTIONS:
        raise ConfigurationError(f"Enumeración demasiado grande: {total} selecciones")
    hits = 0
    selections = itertools.product(*candidates)
    while True:
        block = list(itertools.islice(selections, CHUNK))
        if not block:
            break
        rows = np.array(block, dtype=np.int64).reshape(len(block), model.n_s)
        loads = model.signed_loads(rows, None, direction)
        hits += int(np.count_nonzero(loads > model.asset.d_cap))
    return hits, total * model.T


def exact_risk(asset, corpus, direction):
    """Riesgo exacto: todas las selecciones uniformes × todos los pasos"""
    check_direction(direction)
    model = DemandModel(asset, corpus)
    candidates = [list(range(o, o + s)) for o, s in zip(model.offsets, model.bin_sizes)]
    hits, total = _count_overloads(model, candidates, direction)
    return gmpy2.mpq(hits, total)


def exact_h_bar(asset, corpus, direction, x, model=None):
    """Fracción exacta de sobrecarga dada la asignación spiky/smooth x"""
    check_direction(direction)
    model = model or DemandModel(asset, corpus)
    candidates = []
    for i, (bin_id, offset) in enumerate(zip(model.bin_ids, model.offsets)):
        b = corpus.bin(bin_id)
        members = b.spiky(direction) if x[i] else b.smooth(direction)
        if members.size == 0:
            raise StateError(f"Conjunto vacío en el bin {bin_id} para x_{i}={int(x[i])}")
        candidates.append([int(offset + j) for j in members])
    hits, total = _count_overloads(model, candidates, direction)
    return gmpy2.mpq(hits, total)


def enumerate_assignments(n):
    """Las 2^n asignaciones en orden lexicográfico (False < True)"""
    if n > 20:
        raise ConfigurationError("Demasiados clientes para enumerar asignaciones")
    return np.array(list(itertools.product((False, True), repeat=n)), dtype=bool).reshape(2 ** n, n)


def bernoulli_probability(x, p):
    """Probabilidad exacta Π p_i^{x_i} (1 − p_i)^{1 − x_i}"""
    prob = gmpy2.mpq(1)
    for xi, pi in zip(x, p):
        q = _rational(pi)
        prob *= q if xi else 1 - q
    return prob


def exact_is_sums(u, v, h_bar):
    """
    Sumas exactas sobre todas las asignaciones

    Returns:
        (Σ g·W, Σ g·W·H̄, Σ f·H̄) como racionales
    """
    sum_gw = sum_gwh = sum_fh = gmpy2.mpq(0)
    for x, h in zip(enumerate_assignments(len(u)), h_bar):
        f = bernoulli_probability(x, u)
        g = bernoulli_probability(x, v)
        if g == 0:
            continue
        w = f / g
        sum_gw += g * w
        sum_gwh += g * w * h
        sum_fh += f * h
    return sum_gw, sum_gwh, sum_fh


def exact_ce_update(u, v, h_bar):
    """
    Minimizador CE exacto con umbral fijo

    v'_i = Σ_x g(x;v)·W(x)·H̄(x)·x_i / Σ_x g(x;v)·W(x)·H̄(x)
    """
    n = len(u)
    numer = [gmpy2.mpq(0)] * n
    denom = gmpy2.mpq(0)
    for x, h in zip(enumerate_assignments(n), h_bar):
        g = bernoulli_probability(x, v)
        if g == 0 or h == 0:
            continue
        mass = g * (bernoulli_probability(x, u) / g) * h
        denom += mass
        numer = [acc + mass if xi else acc for acc, xi in zip(numer, x)]
    if denom == 0:
        raise EliteSetEmptyError("Sin masa élite en la enumeración")
    return [acc / denom for acc in numer]
