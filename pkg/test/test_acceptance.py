"""
Pruebas de aceptación contra oráculos exactos
Ejecutar con: python -m pytest test/test_acceptance.py
"""

import os
import sys
import unittest

import gmpy2
import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from bench import welch_test
from ce import CEConfig, ce_estimate
from corpus import DIRECTIONS, POS
from demand import Asset, max_load, smart_meter
from errors import ConfigurationError
from estimators import run_is, run_mc, run_reference
from exact import enumerate_assignments, exact_h_bar, exact_is_sums, exact_risk
from generalize import CEResult, apply_generalized, ce_result_from_asset, derive_bin_probs
from sampling import RngStream, initial_u, log_importance_weights, make_is_params
from toys import all_demands, random_toy, rare_toy, rare_toy_risk, toy_corpus

BETA = 0.05


def covered(estimate, exact):
    """El valor exacto cae dentro de ±3σ = 3·β·r̂ de la estimación"""
    if exact == 0.0:
        return estimate.r_hat == 0.0
    if estimate.beta is None:
        return False
    return abs(estimate.r_hat - exact) <= 3 * estimate.beta * estimate.r_hat


def two_spiky_bins():
    """Dos bins de 20 perfiles constantes en 1.0; el perfil 19 de cada uno suma +3 en t = 0"""
    profiles = np.ones((20, 8))
    profiles[19, 0] += 3.0
    return toy_corpus([profiles, profiles.copy()])


def spiky_asset(asset_id, n_b0, n_b1, k_min):
    """Activo con sobrecarga cuando al menos k_min clientes eligen el perfil con pico"""
    n = n_b0 + n_b1
    customers = [smart_meter(1.0, 'b0')] * n_b0 + [smart_meter(1.0, 'b1')] * n_b1
    return Asset(asset_id, n + 3.0 * k_min - 0.5, customers)


class TestExactnessOracle(unittest.TestCase):
    """Cobertura 3σ del riesgo exacto enumerado en instancias aleatorias"""

    def test_all_methods_cover_exact(self):
        """Probar referencia, MC, IS y CE en 24 instancias × 2 direcciones"""
        failures = {'ref': 0, 'mc': 0, 'is': 0, 'ce-is': 0}
        cases = 0
        config = CEConfig(n_opt=200, beta_target=BETA)
        for seed in range(24):
            corpus, asset = random_toy(seed, n_s=1 + seed % 6)
            for d, direction in enumerate(DIRECTIONS):
                cases += 1
                exact = float(exact_risk(asset, corpus, direction))
                stream = RngStream(seed, (d,))
                T = corpus.T
                estimates = {
                    'ref': run_reference(asset, corpus, direction, BETA, 20000, stream),
                    'mc': run_mc(asset, corpus, direction, T, BETA, 20000, stream),
                }
                u = initial_u(asset, corpus, direction)
                params = make_is_params(u, np.clip(u + 0.15, 0.05, 0.9), direction)
                estimates['is'] = run_is(asset, corpus, params, T, BETA, 20000, rng=stream)
                estimates['ce-is'] = ce_estimate(asset, corpus, direction, config._replace(m=T), stream)[0]
                for method, estimate in estimates.items():
                    if not covered(estimate, exact):
                        failures[method] += 1
        self.assertEqual(cases, 48)
        for method, count in failures.items():
            self.assertLessEqual(count, 2, f"{method}: {count} instancias sin cobertura")


class TestExactIdentities(unittest.TestCase):
    """Identidades exactas del muestreo por importancia"""

    def test_weights_sum_to_one(self):
        """Probar Σ g·W = 1 y Σ g·W·H̄ = Σ f·H̄ con n_s = 12"""
        rng = np.random.default_rng(12)
        u = rng.uniform(0.05, 0.5, 12)
        v = rng.uniform(0.05, 0.9, 12)
        h_bar = [gmpy2.mpq(int(k), 97) for k in rng.integers(0, 98, 2 ** 12)]
        sum_gw, sum_gwh, sum_fh = exact_is_sums(u, v, h_bar)
        self.assertEqual(sum_gw, 1)
        self.assertEqual(sum_gwh, sum_fh)

        x = enumerate_assignments(12)
        g = np.prod(np.where(x, v, 1 - v), axis=1)
        w = np.exp(log_importance_weights(x, u, v))
        self.assertAlmostEqual(float(np.sum(g * w)), 1.0, delta=1e-12)

    def test_conditional_risk_identity(self):
        """Probar Σ f·H̄ = riesgo exacto sobre un activo enumerado"""
        corpus, asset = random_toy(3, n_s=4)
        u = initial_u(asset, corpus, POS)
        v = np.clip(u + 0.2, 0.05, 0.9)
        h_bar = [exact_h_bar(asset, corpus, POS, x) for x in enumerate_assignments(u.size)]
        sum_gw, sum_gwh, sum_fh = exact_is_sums(u, v, h_bar)
        self.assertEqual(sum_gw, 1)
        self.assertEqual(sum_gwh, sum_fh)
        self.assertAlmostEqual(float(sum_fh), float(exact_risk(asset, corpus, POS)), delta=1e-12)


class TestRareEvent(unittest.TestCase):
    """Reducción de varianza en un evento de probabilidad ≈ 1e-5"""

    def test_ce_needs_fewer_traces(self):
        """Probar CE-IS con al menos 5× menos trazas que MC y cobertura 3σ"""
        corpus, asset = rare_toy()
        exact = rare_toy_risk()
        self.assertTrue(5e-6 < exact < 5e-5)

        # Var(H) analítica para MC con m = T: H = 1{K≥4}·N₀/m, N₀ ~ Bin(m, 1/T)
        T = m = corpus.T
        p = exact * T
        second_moment = p * (m * (1 / T) * (1 - 1 / T) + (m / T) ** 2) / m ** 2
        n_mc = (second_moment - exact ** 2) / (exact * 0.1) ** 2

        config = CEConfig(m=m)
        traces, hits = [], 0
        for replicate in range(9):
            estimate, _ = ce_estimate(asset, corpus, POS, config, RngStream(40, (replicate,)))
            self.assertTrue(estimate.converged)
            traces.append(estimate.traces)
            hits += covered(estimate, exact)
        self.assertLessEqual(float(np.median(traces)), n_mc / 5)
        self.assertGreaterEqual(hits, 7)

        mc = run_mc(asset, corpus, POS, m, 0.1, config.n_max, RngStream(40, (99,)))
        self.assertFalse(mc.converged)


class TestZeroEvent(unittest.TestCase):
    """Salida por riesgo nulo"""

    def test_above_global_max(self):
        """Probar d_cap por encima de la demanda máxima alcanzable"""
        corpus, asset = rare_toy()
        # el pico global ocurre con todos los clientes en el perfil con pico
        peak = max_load(asset, corpus, [19] * asset.n_s)
        self.assertEqual(peak, 24.0)
        asset = asset._replace(d_cap=peak + 1.0)
        config = CEConfig(m=corpus.T)
        estimate, trace = ce_estimate(asset, corpus, POS, config, 5)
        self.assertTrue(estimate.zero_flagged)
        self.assertEqual(estimate.r_hat, 0.0)
        self.assertLessEqual(estimate.traces, config.n_max_zero + config.n_opt)
        self.assertEqual(trace.entries[-1].stage, 'zero')

    def test_enumeration_guard(self):
        """Probar que la enumeración de demandas rechaza instancias grandes"""
        corpus, asset = rare_toy()
        with self.assertRaises(ConfigurationError):
            all_demands(asset, corpus)
        corpus, asset = rare_toy(n_customers=3)
        self.assertEqual(float(np.max(all_demands(asset, corpus))), 12.0)


class TestGeneralizedPipeline(unittest.TestCase):
    """CE en 10 activos → probabilidades por bin → activo nuevo"""

    @classmethod
    def setUpClass(cls):
        cls.corpus = two_spiky_bins()
        config = CEConfig(m=8, n_opt=300, n_max=8000, n_max_zero=3000)
        results = []
        for k in range(10):
            n_b0, n_b1 = 2 + k % 3, 2 + (k * 2) % 3
            asset = spiky_asset(f"train-{k}", n_b0, n_b1, 2 + k % 2)
            _, trace = ce_estimate(asset, cls.corpus, POS, config, RngStream(60, (k,)))
            results.append(ce_result_from_asset(asset, trace))
        cls.results = results
        cls.gen = derive_bin_probs(results, cls.corpus, max_customers=80, threshold=0.15)

    def test_held_out_unbiased(self):
        """Probar cobertura del riesgo exacto en un activo no visto"""
        self.assertEqual(len(self.gen.provenance), 10)
        for p in self.gen.probs.values():
            self.assertTrue(0.15 < p <= 0.9)
        asset = spiky_asset('nuevo', 3, 2, 3)
        exact = rare_toy_risk(n_customers=5, d_cap=asset.d_cap)
        params = apply_generalized(asset, self.corpus, self.gen)
        hits = 0
        for replicate in range(5):
            estimate = run_is(asset, self.corpus, params, 8, BETA, 40000, rng=RngStream(61, (replicate,)))
            hits += covered(estimate, exact)
        self.assertGreaterEqual(hits, 4)

    def test_below_threshold_matches_mc(self):
        """Probar que con medias bajo el umbral Gen-IS se reduce a MC"""
        low = [CEResult(r.asset_id, r.direction, r.bin_ids, np.full(len(r.v), 0.1)) for r in self.results]
        gen = derive_bin_probs(low, self.corpus)
        asset = spiky_asset('nuevo', 3, 2, 2)
        params = apply_generalized(asset, self.corpus, gen)
        np.testing.assert_array_equal(params.v, params.u)
        gen_is, mc = [], []
        for replicate in range(9):
            estimate = run_is(asset, self.corpus, params, 8, 0.1, 10000, rng=RngStream(62, (replicate,)))
            # pesos unitarios
            self.assertAlmostEqual(estimate.ess, estimate.n)
            gen_is.append(estimate.r_hat)
            mc.append(run_mc(asset, self.corpus, POS, 8, 0.1, 10000, RngStream(63, (replicate,))).r_hat)
        self.assertGreater(welch_test(gen_is, mc).p, 0.05)


if __name__ == '__main__':
    unittest.main()
