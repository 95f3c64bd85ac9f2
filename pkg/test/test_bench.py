"""
Pruebas unitarias de campañas, filtro de Welch y reporte de aceleraciones
Ejecutar con: python -m pytest test/test_bench.py
"""

import json
import os
import sys
import tempfile
import unittest

import numpy as np
from scipy import stats

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from auditoria import SistemaAuditoria, leer_corridas
from bench import (DEFAULT_REPLICATES, RunRecord, campaign_risks, extrapolate_time, format_table,
                   parse_replicates, record_from_dict, record_to_dict, run_campaign, speedup_report, to_csv,
                   to_json, welch_filter, welch_test)
from ce import CEConfig
from corpus import NEG, POS
from demand import risk_out_of_range
from errors import ConfigurationError
from estimators import CE_IS, GEN_IS, MC, REF, RiskEstimate
from toys import two_bin_toy

SMALL = CEConfig(m=4, n_opt=200, n_max=2000, n_max_zero=400)


def fake_record(asset_id, method, values, elapsed, replicate_base=0, direction=POS, converged=True,
                beta=0.05, zero=False):
    """Registros sintéticos con r̂ y tiempos dados"""
    records = []
    for k, r in enumerate(values):
        estimate = RiskEstimate(method, direction, r, None if zero else beta, 1000, elapsed, converged,
                                zero, asset_id)
        records.append(RunRecord(asset_id, method, direction, replicate_base + k, 1, estimate))
    return records


class TestWelch(unittest.TestCase):
    """Pruebas de la prueba t de Welch"""

    def test_identical(self):
        """Probar t = 0 y p = 1 con réplicas idénticas"""
        result = welch_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        self.assertEqual(result.t, 0.0)
        self.assertAlmostEqual(result.p, 1.0)

    def test_clear_difference(self):
        """Probar p < 0.001 con medias muy separadas"""
        self.assertLess(welch_test([1, 1.1, 0.9], [5, 5.1, 4.9]).p, 0.001)

    def test_equal_variance_df(self):
        """Probar df = 2n − 2 con tamaños y varianzas iguales"""
        result = welch_test([1.0, 2.0, 3.0, 4.0], [11.0, 12.0, 13.0, 14.0])
        self.assertAlmostEqual(result.df, 6.0, places=12)

    def test_zero_variance(self):
        """Probar los casos de varianza nula"""
        self.assertEqual(welch_test([2.0, 2.0], [2.0, 2.0]).p, 1.0)
        self.assertEqual(welch_test([2.0, 2.0], [3.0, 3.0]).p, 0.0)
        with self.assertRaises(ConfigurationError):
            welch_test([1.0], [1.0, 2.0])

    def test_matches_reference(self):
        """Probar p contra el cálculo directo con la distribución t en 100 pares"""
        rng = np.random.default_rng(2024)
        for _ in range(100):
            n_a, n_b = rng.integers(2, 12, 2)
            a = rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2), n_a)
            b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2), n_b)
            va, vb = a.var(ddof=1) / n_a, b.var(ddof=1) / n_b
            t = (a.mean() - b.mean()) / np.sqrt(va + vb)
            df = (va + vb) ** 2 / (va ** 2 / (n_a - 1) + vb ** 2 / (n_b - 1))
            p = 2 * stats.t.sf(abs(t), df)
            result = welch_test(a, b)
            self.assertAlmostEqual(result.p, p, delta=1e-9)
            self.assertAlmostEqual(result.df, df, delta=1e-9 * df)
            self.assertAlmostEqual(welch_test(b, a).p, result.p, delta=1e-12)

    def test_filter_verdicts(self):
        """Probar veredictos exacto, inexacto y sin réplicas suficientes"""
        refs = fake_record('a', REF, [1.0, 1.1, 0.9], 10.0)
        method = (fake_record('a', MC, [1.05, 0.95, 1.0], 1.0)
                  + fake_record('a', CE_IS, [5, 5.1, 4.9], 1.0)
                  + fake_record('a', GEN_IS, [1.0], 1.0))
        verdicts = welch_filter(method, refs)
        self.assertTrue(verdicts[('a', POS, MC)])
        self.assertFalse(verdicts[('a', POS, CE_IS)])
        self.assertIsNone(verdicts[('a', POS, GEN_IS)])


class TestExtrapolation(unittest.TestCase):
    """Pruebas de la extrapolación de tiempos"""

    def test_scaling_law(self):
        """Probar la ley (β/β_objetivo)²"""
        self.assertAlmostEqual(extrapolate_time(10.0, 0.2, 0.1), 40.0, places=12)
        self.assertAlmostEqual(extrapolate_time(7.0, 0.3, 0.1), 63.0, places=12)
        self.assertEqual(extrapolate_time(5.0, 0.1, 0.1), 5.0)
        self.assertEqual(extrapolate_time(5.0, 0.05, 0.1), 5.0)
        self.assertEqual(extrapolate_time(5.0, None, 0.1), 5.0)
        times = [extrapolate_time(3.0, b, 0.1) for b in (0.1, 0.15, 0.2, 0.5)]
        self.assertEqual(times, sorted(times))


class TestSpeedupReport(unittest.TestCase):
    """Pruebas de la tabla de aceleraciones"""

    def records(self):
        return (fake_record('alto', REF, [0.010, 0.011, 0.012], 100.0)
                + fake_record('alto', MC, [0.0105, 0.0112, 0.0110], 10.0)
                + fake_record('bajo', REF, [2.0e-5, 2.1e-5, 2.2e-5], 50.0)
                + fake_record('bajo', CE_IS, [2.05e-5, 2.1e-5, 2.12e-5], 5.0)
                + fake_record('bajo', MC, [0.0, 0.0, 0.0], 1.0, zero=True)
                + fake_record('bajo', GEN_IS, [9e-5, 9.1e-5, 8.9e-5], 1.0)
                + [RunRecord('alto', CE_IS, POS, 0, 1, None, 'fallo')])

    def test_magnitude_rows(self):
        """Probar dos filas de magnitud con conteos y aceleración 10"""
        table, summary = speedup_report(self.records())
        self.assertEqual([(r.magnitude, r.method) for r in table.rows], [(-5, CE_IS), (-2, MC)])
        for row in table.rows:
            self.assertAlmostEqual(row.speedup, 10.0)
            self.assertEqual((row.assets, row.estimates), (1, 3))
        self.assertEqual(summary['included'], 6)
        self.assertEqual(summary['excluded'], {'failed': 1, 'zero': 3, 'inaccurate': 3, 'untested': 0,
                                               'no_reference': 0})

    def test_extrapolated_time(self):
        """Probar que las corridas sin convergencia usan el tiempo extrapolado"""
        records = (fake_record('a', REF, [0.1, 0.11, 0.09], 40.0, converged=False, beta=0.2)
                   + fake_record('a', MC, [0.1, 0.105, 0.095], 16.0))
        table, _ = speedup_report(records)
        self.assertAlmostEqual(table.rows[0].speedup, 10.0)

    def test_conventions(self):
        """Probar promedio por activo frente a cociente de medias globales"""
        records = (fake_record('a', REF, [0.2, 0.21, 0.19], 100.0)
                   + fake_record('a', MC, [0.2, 0.205, 0.195], 10.0)
                   + fake_record('b', REF, [0.3, 0.31, 0.29], 10.0)
                   + fake_record('b', MC, [0.3, 0.305, 0.295], 20.0))
        by_asset, _ = speedup_report(records)
        grand, _ = speedup_report(records, convention='grand')
        self.assertAlmostEqual(by_asset.rows[0].speedup, (10.0 + 0.5) / 2)
        self.assertAlmostEqual(grand.rows[0].speedup, 55.0 / 15.0)
        self.assertEqual(grand.convention, 'grand')
        with self.assertRaises(ConfigurationError):
            speedup_report(records, convention='otra')

    def test_requires_reference(self):
        """Probar error sin corridas de referencia"""
        with self.assertRaises(ConfigurationError):
            speedup_report(fake_record('a', MC, [0.1, 0.2], 1.0))

    def test_renderers(self):
        """Probar salidas de tabla, CSV y JSON"""
        table, summary = speedup_report(self.records())
        text = format_table(table, summary)
        self.assertIn('1e-5', text)
        lines = to_csv(table).splitlines()
        self.assertEqual(lines[0], 'magnitude,method,direction,speedup,assets,estimates')
        self.assertEqual(len(lines), 1 + len(table.rows) + len(table.overall))
        data = json.loads(to_json(table, summary))
        self.assertEqual(len(data['rows']), 2)
        self.assertEqual(data['summary']['excluded']['zero'], 3)


class TestCampaign(unittest.TestCase):
    """Pruebas de la ejecución de campañas"""

    def setUp(self):
        corpus, asset = two_bin_toy()
        self.corpus = corpus
        self.assets = [asset, asset._replace(asset_id='toy-2b', d_cap=3.5)]

    def test_count_and_determinism(self):
        """Probar 24 registros y r̂ idénticos con la misma semilla"""
        first = run_campaign(self.assets, self.corpus, [MC, CE_IS], 3, SMALL, 42)
        self.assertEqual(len(first), 24)
        cells = {(r.asset_id, r.method, r.direction, r.replicate) for r in first}
        self.assertEqual(len(cells), 24)
        second = run_campaign(self.assets, self.corpus, [MC, CE_IS], 3, SMALL, 42, workers=3)
        self.assertEqual([r.estimate.r_hat for r in first], [r.estimate.r_hat for r in second])
        zeros = [r for r in first if r.direction == NEG]
        self.assertTrue(all(r.estimate.zero_flagged for r in zeros))

    def test_failures_recorded(self):
        """Probar que una corrida fallida queda registrada y la campaña sigue"""
        with self.assertLogs('bench', level='WARNING'):
            records = run_campaign(self.assets[:1], self.corpus, [GEN_IS, MC], 1, SMALL, 1,
                                   directions=(POS,))
        self.assertEqual(len(records), 2)
        failed = [r for r in records if r.method == GEN_IS][0]
        self.assertIsNone(failed.estimate)
        self.assertIn('Gen-IS', failed.error)
        self.assertIsNotNone([r for r in records if r.method == MC][0].estimate)

    def test_invalid_campaign(self):
        """Probar métodos y réplicas inválidos"""
        with self.assertRaises(ConfigurationError):
            run_campaign(self.assets, self.corpus, ['xx'], 1, SMALL, 1)
        with self.assertRaises(ConfigurationError):
            run_campaign(self.assets, self.corpus, [MC], 0, SMALL, 1)

    def test_replicates_per_method(self):
        """Probar réplicas distintas por método y celdas reproducibles"""
        records = run_campaign(self.assets[:1], self.corpus, [MC, CE_IS], {MC: 3, CE_IS: 2}, SMALL, 42,
                               directions=(POS,))
        self.assertEqual([(r.method, r.replicate) for r in records],
                         [(MC, 0), (MC, 1), (MC, 2), (CE_IS, 0), (CE_IS, 1)])
        common = run_campaign(self.assets[:1], self.corpus, [MC], 3, SMALL, 42, directions=(POS,))
        self.assertEqual([r.estimate.r_hat for r in common], [r.estimate.r_hat for r in records[:3]])
        with self.assertRaises(ConfigurationError):
            run_campaign(self.assets, self.corpus, [MC, CE_IS], {MC: 3}, SMALL, 1)
        with self.assertRaises(ConfigurationError):
            run_campaign(self.assets, self.corpus, [MC], {MC: 0}, SMALL, 1)

    def test_parse_replicates(self):
        """Probar el formato 'común,método=n' de las réplicas"""
        self.assertEqual(dict(parse_replicates(DEFAULT_REPLICATES, [REF, MC, CE_IS, GEN_IS])),
                         {REF: 9, MC: 9, CE_IS: 9, GEN_IS: 5})
        self.assertEqual(dict(parse_replicates('4', [MC])), {MC: 4})
        self.assertEqual(dict(parse_replicates('mc=2,ce-is=1', [MC, CE_IS])), {MC: 2, CE_IS: 1})
        for text in ('mc=2', 'x=3,2', 'mc=dos'):
            with self.assertRaises(ConfigurationError):
                parse_replicates(text, [MC, CE_IS])

    def test_campaign_risks(self):
        """Probar el riesgo por celda y el aviso de activos fuera de rango"""
        records = (fake_record('a', REF, [1e-3, 3e-3], 1.0) + fake_record('a', MC, [0.5], 1.0)
                   + fake_record('b', MC, [0.2, 0.4], 1.0) + fake_record('c', MC, [1e-4], 1.0))
        records.append(RunRecord('d', MC, POS, 0, 1, None, 'falló'))
        risks = campaign_risks(records)
        self.assertEqual(set(risks), {('a', POS), ('b', POS), ('c', POS)})
        self.assertAlmostEqual(risks[('a', POS)], 2e-3)
        self.assertAlmostEqual(risks[('b', POS)], 0.3)
        with self.assertLogs('demand', level='WARNING') as logs:
            outside = risk_out_of_range(risks)
        self.assertEqual([(a, d) for a, d, _ in outside], [('b', POS)])
        self.assertIn('b', logs.output[0])

    def test_audit_chain(self):
        """Probar runs.jsonl encadenado y detección de alteraciones"""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'runs.jsonl')
            with SistemaAuditoria(path) as auditoria:
                records = run_campaign(self.assets[:1], self.corpus, [REF, MC], 2, SMALL, 5,
                                       directions=(POS,), auditoria=auditoria)
                self.assertTrue(auditoria.verificar_integridad())
            data, integra = leer_corridas(path)
            self.assertTrue(integra)
            self.assertEqual([record_from_dict(d) for d in data], records)
            self.assertEqual(record_to_dict(records[0]), data[0])

            with open(path) as f:
                lines = [json.loads(line) for line in f]
            lines[1]['estimate']['r_hat'] = 0.5
            with open(path, 'w') as f:
                f.writelines(json.dumps(line, sort_keys=True) + '\n' for line in lines)
            _, integra = leer_corridas(path)
            self.assertFalse(integra)


if __name__ == '__main__':
    unittest.main()
