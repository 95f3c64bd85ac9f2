"""
Pruebas unitarias del corpus de perfiles
Ejecutar con: python -m pytest test/test_corpus.py
"""

import os
import sys
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from corpus import (DT_HOURS, NEG, POS, CategorySpec, CorpusSpec, Profile, check_corpus_invariants,
                    classify_spiky, corpus_spec_from_dict, delta_minus, delta_plus, empirical_quantile,
                    load_corpus, make_bin, median_profile, profile_energy, quantile_bin, save_corpus,
                    scale_profile, spiky_count, synthesize_corpus)
from errors import ConfigurationError, DataError, StateError
from toys import small_corpus_spec, toy_corpus


def bin_with_deltas(deltas):
    """Bin cuyo perfil k supera a la mediana (cero) en sqrt(Δ_k) en un único paso"""
    n = len(deltas)
    profiles = np.zeros((n, n))
    for k, d in enumerate(deltas):
        profiles[k, k] = np.sqrt(d)
    return make_bin('b', 'cat', profiles)


class TestQuantileBin(unittest.TestCase):
    """Pruebas del agrupamiento por cuantiles"""

    def test_even_split(self):
        """Probar división 50/50 en la mediana"""
        values = np.arange(100, 0, -1, dtype=float)
        assignment = quantile_bin(values, 2)
        self.assertEqual(assignment.count(0), 50)
        self.assertEqual(assignment.count(1), 50)
        self.assertTrue(all(a == 0 for v, a in zip(values, assignment) if v <= 50))

    def test_one_per_bin(self):
        """Probar un valor por bin en orden"""
        self.assertEqual(quantile_bin([3, 1, 4, 2], 4), [2, 0, 3, 1])

    def test_uneven_sizes(self):
        """Probar tamaños que difieren en a lo sumo 1"""
        assignment = quantile_bin(np.arange(101.0), 2)
        self.assertEqual(sorted([assignment.count(0), assignment.count(1)]), [50, 51])

    def test_too_many_bins(self):
        """Probar error con más bins que valores"""
        with self.assertRaises(ConfigurationError):
            quantile_bin([1.0, 2.0], 3)

    @given(st.lists(st.floats(0, 1e5), min_size=4, max_size=60), st.integers(1, 4))
    @settings(max_examples=50, deadline=None)
    def test_monotone(self, values, n_bins):
        """Probar que un consumo mayor nunca cae en un bin menor"""
        assignment = quantile_bin(values, n_bins)
        pairs = sorted(zip(values, assignment))
        for (v1, a1), (v2, a2) in zip(pairs, pairs[1:]):
            if v1 < v2:
                self.assertLessEqual(a1, a2)
        sizes = [assignment.count(b) for b in range(n_bins)]
        self.assertLessEqual(max(sizes) - min(sizes), 1)


class TestDeltas(unittest.TestCase):
    """Pruebas de perfiles medianos y métricas de desviación"""

    def test_median_profile(self):
        """Probar mediana por paso, incluida la convención par"""
        single = make_bin('b', 'c', [[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(median_profile(single).values, [1.0, 2.0, 3.0])
        odd = make_bin('b', 'c', [[1.0], [5.0], [9.0]])
        self.assertEqual(median_profile(odd).values[0], 5.0)
        even = make_bin('b', 'c', [[1.0], [2.0], [8.0], [9.0]])
        self.assertEqual(median_profile(even).values[0], 5.0)

    def test_delta_values(self):
        """Probar valores calculados a mano"""
        s, m = [2.0, 0.0], [1.0, 1.0]
        self.assertEqual(delta_plus(s, m), 1.0)
        self.assertEqual(delta_minus(s, m), 1.0)
        self.assertEqual(delta_plus(m, m), 0.0)
        self.assertEqual(delta_plus(np.ones(4) + 1.0, np.ones(4)), 4.0)

    def test_length_mismatch(self):
        """Probar error con longitudes distintas"""
        with self.assertRaises(ValueError):
            delta_plus([1.0, 2.0], [1.0])

    @given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=1, max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_partition_identity(self, pairs):
        """Probar Δ₊ + Δ₋ = desviación cuadrática total"""
        s = np.array([p[0] for p in pairs])
        m = np.array([p[1] for p in pairs])
        total = float(np.sum((s - m) ** 2))
        self.assertAlmostEqual(delta_plus(s, m) + delta_minus(s, m), total, delta=1e-9 * max(1.0, total))


class TestClassification(unittest.TestCase):
    """Pruebas de la clasificación spiky/smooth"""

    def test_top_five_of_hundred(self):
        """Probar que se eligen exactamente los 5 mayores de 100"""
        rng = np.random.default_rng(3)
        deltas = rng.permutation(np.arange(1, 101, dtype=float))
        spiky = classify_spiky(bin_with_deltas(deltas), 0.95, POS)
        self.assertEqual(sorted(deltas[spiky]), [96.0, 97.0, 98.0, 99.0, 100.0])

    def test_top_one_of_twenty(self):
        """Probar que se elige el mayor de 20"""
        deltas = np.arange(1, 21, dtype=float)
        spiky = classify_spiky(bin_with_deltas(deltas), 0.95, POS)
        self.assertEqual(spiky.tolist(), [19])

    def test_small_q_selects_all(self):
        """Probar q_spiky cercano a 0: todo el bin es spiky"""
        deltas = np.arange(1, 21, dtype=float)
        self.assertEqual(classify_spiky(bin_with_deltas(deltas), 1e-6, POS).size, 20)

    def test_all_equal_is_degenerate(self):
        """Probar que Δ iguales clasifican todo el bin como spiky con aviso"""
        b = make_bin('b', 'c', np.ones((5, 4)))
        with self.assertLogs('corpus', level='WARNING'):
            spiky = classify_spiky(b, 0.95, NEG)
        self.assertEqual(spiky.size, 5)

    def test_partition(self):
        """Probar que spiky y smooth son disjuntos y exhaustivos"""
        corpus = toy_corpus([np.random.default_rng(1).normal(size=(30, 8))])
        b = corpus.bin('b0')
        for direction in (POS, NEG):
            spiky, smooth = set(b.spiky(direction)), set(b.smooth(direction))
            self.assertFalse(spiky & smooth)
            self.assertEqual(spiky | smooth, set(range(30)))
            self.assertEqual(len(spiky), spiky_count(30, 0.95))

    def test_unclassified_bin(self):
        """Probar error al consultar un bin sin clasificar"""
        with self.assertRaises(StateError):
            make_bin('b', 'c', np.ones((2, 2))).spiky(POS)

    def test_empirical_quantile(self):
        """Probar la convención de índice ordenado"""
        self.assertEqual(empirical_quantile(np.arange(1, 101), 0.95), 95.0)
        self.assertEqual(empirical_quantile([4, 3, 2, 1], 0.5), 2.0)
        self.assertEqual(empirical_quantile([7.0, 7.0, 7.0], 0.3), 7.0)


class TestScaling(unittest.TestCase):
    """Pruebas de escalado por consumo anual"""

    def test_scale_energy(self):
        """Probar que el perfil escalado tiene energía γ"""
        raw = np.abs(np.random.default_rng(0).normal(size=96)) + 0.1
        unit = Profile('p', raw / (raw.sum() * DT_HOURS))
        self.assertAlmostEqual(profile_energy(unit), 1.0, places=12)
        self.assertAlmostEqual(profile_energy(scale_profile(unit, 3500.0)), 3500.0, delta=3500.0 * 1e-9)
        np.testing.assert_array_equal(scale_profile(unit, 0.0).values, np.zeros(96))
        np.testing.assert_allclose(scale_profile(unit, 1.0).values, unit.values)

    def test_negative_gamma(self):
        """Probar error con consumo negativo"""
        with self.assertRaises(ValueError):
            scale_profile(np.ones(4), -1.0)


class TestSynthesis(unittest.TestCase):
    """Pruebas de la síntesis de corpus"""

    @classmethod
    def setUpClass(cls):
        cls.spec = small_corpus_spec()
        cls.corpus = synthesize_corpus(cls.spec, 7)

    def test_shape(self):
        """Probar bins y dimensiones pedidos en el CorpusSpec"""
        spec = CorpusSpec((CategorySpec('c', n_bins=2, profiles_per_bin=60),), T=96)
        corpus = synthesize_corpus(spec, 7)
        self.assertEqual(len(corpus.bins), 2)
        for b in corpus.bins.values():
            self.assertEqual(b.profiles.shape, (60, 96))

    def test_deterministic(self):
        """Probar corpus idénticos con la misma semilla"""
        other = synthesize_corpus(self.spec, 7)
        for a, b in zip(self.corpus.bins.values(), other.bins.values()):
            np.testing.assert_array_equal(a.profiles, b.profiles)
            np.testing.assert_array_equal(a.spiky_plus, b.spiky_plus)
        different = synthesize_corpus(self.spec, 8)
        first = next(iter(different.bins.values()))
        self.assertFalse(np.array_equal(first.profiles, next(iter(self.corpus.bins.values())).profiles))

    def test_invariants(self):
        """Probar invariantes de bins, perfiles y energía"""
        self.assertEqual(check_corpus_invariants(self.corpus), [])
        for b in self.corpus.bins.values():
            energies = b.profiles.astype(np.float64).sum(axis=1) * DT_HOURS
            np.testing.assert_allclose(energies, 1.0, rtol=1e-4)
        self.assertEqual(set(self.corpus.average_profiles), {'agricola'})
        self.assertEqual(len(self.corpus.telemetry_profiles), 2)

    def test_spikes_dominate_upper_tail(self):
        """Probar que los perfiles con picos inyectados ocupan la cola superior de Δ₊"""
        spec = CorpusSpec((CategorySpec('c', n_bins=2, profiles_per_bin=100),), T=192,
                          spike_fraction=0.1, pv_fraction=0.0)
        corpus = synthesize_corpus(spec, 11)
        for b in corpus.bins.values():
            median = median_profile(b)
            deltas = np.array([delta_plus(b.profiles[k], median) for k in range(b.size)])
            top = np.argsort(deltas)[-10:]
            self.assertGreaterEqual(int(np.sum(b.injected[top])), 7)

    def test_invalid_spec(self):
        """Probar errores de configuración"""
        with self.assertRaises(ConfigurationError):
            synthesize_corpus(CorpusSpec((CategorySpec('c'),), T=0), 1)
        with self.assertRaises(ConfigurationError):
            synthesize_corpus(CorpusSpec((CategorySpec('c', profiles_per_bin=0),), T=8), 1)
        with self.assertRaises(ConfigurationError):
            corpus_spec_from_dict({'T': 8})

    def test_spec_from_dict(self):
        """Probar lectura de especificación desde diccionario"""
        spec = corpus_spec_from_dict({'categories': [{'category_id': 'x', 'n_bins': 3}], 'T': 96})
        self.assertEqual(spec.categories[0].n_bins, 3)
        self.assertEqual(spec.q_spiky, 0.95)

    def test_save_and_load(self):
        """Probar escritura y lectura bit a bit"""
        with tempfile.TemporaryDirectory() as tmp:
            save_corpus(self.corpus, tmp)
            loaded = load_corpus(tmp)
            self.assertEqual(loaded.T, self.corpus.T)
            self.assertEqual(list(loaded.bins), list(self.corpus.bins))
            for a, b in zip(self.corpus.bins.values(), loaded.bins.values()):
                self.assertEqual(a.profiles.tobytes(), b.profiles.tobytes())
                np.testing.assert_array_equal(a.spiky_minus, b.spiky_minus)
            for key, values in self.corpus.telemetry_profiles.items():
                np.testing.assert_array_equal(values, loaded.telemetry_profiles[key])

    def test_load_missing(self):
        """Probar error al leer un directorio vacío"""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(DataError):
                load_corpus(tmp)


if __name__ == '__main__':
    unittest.main()
