#!/usr/bin/env python3
"""
Evaluación de adecuación de activos de distribución por simulación

Estima la probabilidad de sobrecarga positiva o negativa de transformadores
MT/BT a partir de un modelo de demanda bottom-up con perfiles de medidores
inteligentes:
- Monte Carlo de referencia (año completo) y convencional (m pasos)
- Muestreo por importancia optimizado por entropía cruzada (CE-IS)
- Distribución de importancia generalizada por bin (Gen-IS)
- Campañas replicadas con reporte de aceleraciones y auditoría encadenada
"""
import argparse
import json
import logging
import os
import sys
import tempfile

from auditoria import SistemaAuditoria, leer_corridas
from bench import (DEFAULT_REPLICATES, campaign_risks, format_table, parse_replicates, record_from_dict,
                   run_campaign, run_method, speedup_report, to_csv, to_json)
from ce import ce_estimate, load_config
from corpus import (DIRECTIONS, STEPS_PER_YEAR, CategorySpec, CorpusSpec, check_corpus_invariants,
                    classify_corpus, load_corpus, load_corpus_spec, save_corpus, synthesize_corpus)
from demand import (DEFAULT_ASSET_COUNT, RISK_RANGE, design_assets, find_asset, load_assets,
                    risk_out_of_range, save_assets, validate_assets)
from errors import AdequacyError, DataError
from estimators import CE_IS, MC, METHODS, REF, estimate_to_record
from generalize import (ce_result_from_asset, derive_bin_probs, load_ce_results, load_gen_probs,
                        save_gen_probs)

logger = logging.getLogger(__name__)

DEFAULT_CATEGORIES = (
    CategorySpec('hogar', n_bins=3, profiles_per_bin=60, gamma_median=3500, gamma_sigma=0.4),
    CategorySpec('comercio', n_bins=2, profiles_per_bin=50, gamma_median=12000, gamma_sigma=0.5),
)


def default_corpus_spec(T=STEPS_PER_YEAR):
    return CorpusSpec(DEFAULT_CATEGORIES, T=T, average_categories=('agricola',), n_telemetry=4)


def print_header():
    """Imprime el encabezado del sistema"""
    print("\n" + "█" * 70)
    print("█" + " " * 68 + "█")
    print("█" + " " * 14 + "EVALUACIÓN DE ADECUACIÓN DE ACTIVOS MT/BT" + " " * 13 + "█")
    print("█" + " " * 11 + "Monte Carlo + Muestreo por Importancia (CE)" + " " * 14 + "█")
    print("█" + " " * 68 + "█")
    print("█" * 70)


def print_phase(title):
    print("\n" + "▓" * 70)
    print(f"▓ {title}")
    print("▓" * 70)


def _load_classified(corpus_dir, q_spiky):
    corpus = load_corpus(corpus_dir)
    if corpus.q_spiky != q_spiky or not all(corpus.is_classified(d) for d in DIRECTIONS):
        logger.info("Reclasificando el corpus con q_spiky=%s", q_spiky)
        corpus = classify_corpus(corpus, q_spiky)
    return corpus


def _config(args):
    overrides = {name: getattr(args, name, None) for name in
                 ('m', 'n_opt', 'rho', 'alpha', 'q_spiky', 'beta_target', 'n_max', 'n_max_zero', 'batch')}
    if getattr(args, 'no_monotone_threshold', False):
        overrides['monotone_threshold'] = False
    if getattr(args, 'full_year_max', False):
        overrides['full_year_max'] = True
    return load_config(args.config, **overrides)


def _gen_probs(paths):
    table = {}
    for path in paths or []:
        gen = load_gen_probs(path)
        table[gen.direction] = gen
    return table


# ---------------------------------------------------------------------------
# Subcomandos
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args):
    spec = load_corpus_spec(args.spec) if args.spec else default_corpus_spec(args.steps or STEPS_PER_YEAR)
    if args.spec and args.steps:
        spec = spec._replace(T=args.steps)
    corpus = synthesize_corpus(spec, args.seed)
    save_corpus(corpus, args.out)
    for problem in check_corpus_invariants(corpus, spec.min_bins, spec.max_bins, spec.min_profiles_per_bin):
        print(f"  ⚠ {problem}", file=sys.stderr)
    print(f"  ✓ {corpus!r} guardado en {args.out}")
    return 0


def cmd_define_assets(args):
    corpus = load_corpus(args.corpus)
    if args.synthesize:
        assets = design_assets(corpus, args.synthesize, args.min_customers, args.max_customers, args.seed)
        save_assets(assets, args.assets)
        print(f"  ✓ {len(assets)} activos sintéticos guardados en {args.assets}")
    else:
        assets = load_assets(args.assets)
        problems = validate_assets(assets, corpus)
        for asset_id, message in problems:
            print(f"  ✗ {asset_id}: {message}", file=sys.stderr)
        if problems:
            raise DataError(f"{len(problems)} problemas en {args.assets}")
        print(f"  ✓ {len(assets)} activos válidos")
    if args.check_risk:
        config = _config(args)
        corpus = _load_classified(args.corpus, config.q_spiky)
        risks = {}
        for asset in assets:
            for direction in args.directions.split(','):
                estimate = ce_estimate(asset, corpus, direction, config, args.seed, args.workers)[0]
                risks[(asset.asset_id, direction)] = estimate.r_hat
        outside = risk_out_of_range(risks)
        print(f"  {'⚠' if outside else '✓'} {len(risks) - len(outside)}/{len(risks)} riesgos CE-IS "
              f"dentro de [{RISK_RANGE[0]:.0e}, {RISK_RANGE[1]:.0e}]")
    return 0


def cmd_estimate(args):
    config = _config(args)
    corpus = _load_classified(args.corpus, config.q_spiky)
    asset = find_asset(load_assets(args.assets), args.asset)
    if args.method == CE_IS:
        estimate, trace = ce_estimate(asset, corpus, args.direction, config, args.seed, args.workers)
        if args.trace:
            trace.to_jsonl(args.trace)
    else:
        estimate = run_method(asset, corpus, args.method, args.direction, config, args.seed,
                              _gen_probs(args.gen_probs), args.workers)
    print(json.dumps(estimate_to_record(estimate), sort_keys=True))
    return 0


def cmd_generalize(args):
    corpus = _load_classified(args.corpus, args.q_spiky)
    results = load_ce_results(args.ce_results)
    gen = derive_bin_probs(results, corpus, args.max_customers, args.threshold, args.q_spiky,
                           args.weighting, args.direction)
    save_gen_probs(gen, args.out)
    print(f"  ✓ Probabilidades de {len(gen.probs)} bins ({len(gen.provenance)} activos) en {args.out}")
    return 0


def cmd_bench(args):
    config = _config(args)
    corpus = _load_classified(args.corpus, config.q_spiky)
    assets = load_assets(args.assets)
    if args.asset_ids:
        assets = [find_asset(assets, a) for a in args.asset_ids.split(',')]
    methods = args.methods.split(',')
    directions = args.directions.split(',')
    replicates = parse_replicates(args.replicates, methods)
    with SistemaAuditoria(args.out) as auditoria:
        records = run_campaign(assets, corpus, methods, replicates, config, args.seed, directions,
                               _gen_probs(args.gen_probs), args.workers, auditoria)
        auditoria.imprimir_resumen()
    failed = sum(1 for r in records if r.estimate is None)
    print(f"  ✓ {len(records)} corridas en {args.out} ({failed} fallidas)")
    risk_out_of_range(campaign_risks(records))
    return 0


def cmd_report(args):
    lines, integra = leer_corridas(args.runs)
    if not integra:
        print(f"  ⚠ La cadena de hashes de {args.runs} no es íntegra (archivo alterado)", file=sys.stderr)
    records = [record_from_dict(line) for line in lines]
    risk_out_of_range(campaign_risks(records))
    table, summary = speedup_report(records, args.significance, args.convention, args.beta_target)
    if args.format == 'csv':
        sys.stdout.write(to_csv(table))
    elif args.format == 'json':
        print(to_json(table, summary))
    else:
        print(format_table(table, summary))
    return 0


def cmd_demo(args):
    """Recorrido completo sobre un corpus pequeño de una semana"""
    print_header()
    with tempfile.TemporaryDirectory() as workdir:
        print_phase("FASE 1: CORPUS DE PERFILES")
        spec = default_corpus_spec(T=args.steps)
        corpus = synthesize_corpus(spec, args.seed)
        save_corpus(corpus, os.path.join(workdir, 'corpus'))
        print(f"  ✓ {corpus!r}")
        for b in corpus.bins.values():
            print(f"    {b.bin_id}: {b.size} perfiles, spiky+ {b.spiky_plus.size}, spiky− {b.spiky_minus.size}")

        print_phase("FASE 2: ACTIVOS")
        assets = design_assets(corpus, 4, min_customers=5, max_customers=30, seed=args.seed,
                               headroom=(1.2, 2.0))
        for asset in assets:
            print(f"  ✓ {asset.asset_id}: d_cap={asset.d_cap:.2f} kW, "
                  f"{asset.n_s}/{asset.n_l}/{asset.n_a} clientes por grupo")

        print_phase("FASE 3: ESTIMACIÓN")
        config = load_config(args.config, m=min(200, corpus.T), n_opt=200, n_max=4000, n_max_zero=2000)
        asset = assets[-1]
        for method in (MC, CE_IS):
            estimate = run_method(asset, corpus, method, 'pos', config, args.seed)
            beta = f"{estimate.beta:.3f}" if estimate.beta is not None else "—"
            print(f"  → {method:>6}: r̂={estimate.r_hat:.3e}  β={beta}  trazas={estimate.traces}  "
                  f"t={estimate.elapsed:.2f}s")
        estimate, trace = ce_estimate(asset, corpus, 'pos', config, args.seed)
        results = [ce_result_from_asset(asset, trace)]
        gen = derive_bin_probs(results, corpus, direction='pos')
        print(f"  ✓ Gen-IS derivado de {len(gen.provenance)} activo(s), {len(gen.probs)} bins")

        print_phase("FASE 4: CAMPAÑA Y REPORTE")
        runs = os.path.join(workdir, 'runs.jsonl')
        with SistemaAuditoria(runs) as auditoria:
            records = run_campaign(assets[:2], corpus, [REF, MC, CE_IS], 2, config, args.seed, ('pos',),
                                   workers=args.workers, auditoria=auditoria)
            auditoria.verificar_integridad(verbose=True)
        lines, integra = leer_corridas(runs)
        table, summary = speedup_report([record_from_dict(line) for line in lines],
                                        beta_target=config.beta_target)
        print(format_table(table, summary))
        print(f"  ✓ {len(records)} corridas, cadena íntegra: {'sí' if integra else 'no'}")
    return 0


# ---------------------------------------------------------------------------
# Línea de comandos
# ---------------------------------------------------------------------------

def _add_method_options(parser):
    parser.add_argument('--m', type=int, help="pasos de tiempo por traza (2000)")
    parser.add_argument('--n-opt', type=int, help="trazas por iteración CE (500)")
    parser.add_argument('--rho', type=float, help="parámetro multinivel ρ (0.05)")
    parser.add_argument('--alpha', type=float, help="suavizado α (0.6)")
    parser.add_argument('--q-spiky', type=float, help="cuantil spiky (0.95)")
    parser.add_argument('--beta-target', type=float, help="error relativo objetivo (0.1)")
    parser.add_argument('--n-max', type=int, help="máximo de trazas (20000)")
    parser.add_argument('--n-max-zero', type=int, help="trazas sin sobrecarga antes de declarar r≈0 (10000)")
    parser.add_argument('--batch', type=int, help="tamaño de lote (50)")
    parser.add_argument('--no-monotone-threshold', action='store_true', help="permite que d_opt disminuya")
    parser.add_argument('--full-year-max', action='store_true', help="cargas máximas CE sobre el año completo")
    parser.add_argument('--gen-probs', action='append', help="probabilidades Gen-IS (una por dirección)")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=0, help="semilla (0)")
    common.add_argument('--workers', type=int, default=1, help="hilos de trabajo (1)")
    common.add_argument('--config', help="archivo JSON con parámetros de los métodos")
    common.add_argument('-v', '--verbose', action='count', default=0, help="-v INFO, -vv DEBUG")

    parser = argparse.ArgumentParser(prog='adecuacion', description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-corpus', parents=[common], help="sintetiza un corpus de perfiles")
    p.add_argument('--spec', help="especificación JSON del corpus")
    p.add_argument('--steps', type=int, help="pasos de tiempo por perfil (35040)")
    p.add_argument('--out', required=True, help="directorio de salida")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser('define-assets', parents=[common], help="valida o sintetiza activos")
    p.add_argument('--corpus', required=True)
    p.add_argument('--assets', required=True)
    p.add_argument('--synthesize', type=int, nargs='?', const=DEFAULT_ASSET_COUNT, metavar='N',
                   help=f"genera N activos sintéticos ({DEFAULT_ASSET_COUNT})")
    p.add_argument('--min-customers', type=int, default=5)
    p.add_argument('--max-customers', type=int, default=120)
    p.add_argument('--check-risk', action='store_true',
                   help="estima con CE-IS y avisa de riesgos fuera de [1e-8, 1e-1]")
    p.add_argument('--directions', default=','.join(DIRECTIONS))
    _add_method_options(p)
    p.set_defaults(func=cmd_define_assets)

    p = sub.add_parser('estimate', parents=[common], help="estima el riesgo de un activo")
    p.add_argument('--corpus', required=True)
    p.add_argument('--assets', required=True)
    p.add_argument('--asset', required=True)
    p.add_argument('--method', choices=METHODS, required=True)
    p.add_argument('--direction', choices=DIRECTIONS, default='pos')
    p.add_argument('--trace', help="archivo JSONL para la traza CE")
    _add_method_options(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser('generalize', parents=[common], help="deriva probabilidades Gen-IS por bin")
    p.add_argument('--corpus', required=True)
    p.add_argument('--ce-results', required=True, help="directorio con trazas CE (*.jsonl)")
    p.add_argument('--max-customers', type=int, default=80)
    p.add_argument('--threshold', type=float, default=0.15)
    p.add_argument('--q-spiky', type=float, default=0.95)
    p.add_argument('--weighting', choices=('customer', 'asset'), default='customer')
    p.add_argument('--direction', choices=DIRECTIONS)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_generalize)

    p = sub.add_parser('bench', parents=[common], help="campaña replicada de métodos")
    p.add_argument('--corpus', required=True)
    p.add_argument('--assets', required=True)
    p.add_argument('--asset-ids', help="subconjunto de activos separados por comas")
    p.add_argument('--methods', default=','.join(METHODS))
    p.add_argument('--directions', default=','.join(DIRECTIONS))
    p.add_argument('--replicates', default=DEFAULT_REPLICATES,
                   help=f"réplicas: entero común y excepciones método=n ({DEFAULT_REPLICATES})")
    p.add_argument('--out', required=True)
    _add_method_options(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser('report', parents=[common], help="tabla de aceleraciones de una campaña")
    p.add_argument('--runs', required=True)
    p.add_argument('--format', choices=('table', 'csv', 'json'), default='table')
    p.add_argument('--significance', type=float, default=0.05)
    p.add_argument('--convention', choices=('asset', 'grand'), default='asset')
    p.add_argument('--beta-target', type=float, default=0.1)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser('demo', parents=[common], help="recorrido de demostración")
    p.add_argument('--steps', type=int, default=672)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None):
    """Función principal; devuelve el código de salida"""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=max(logging.DEBUG, logging.WARNING - 10 * args.verbose), stream=sys.stderr,
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        return args.func(args)
    except AdequacyError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("\n\nEjecución interrumpida por el usuario.", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
