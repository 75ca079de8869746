from dataclasses import replace

import numpy as np
from django.conf import settings

from selection.exceptions import InvalidHyper
from selection.management.base import SelectionCommand
from selection.services.pipeline import HARNESS_METHODS
from selection.services.simulation import (
    BASELINE_OMEGA0,
    HARNESS_SETTINGS,
    SCENARIO_OMEGA1,
    ScenarioConfig,
    run_scenario,
)
from selection.services.tables import write_csv, write_summary


class Command(SelectionCommand):
    help = 'Simulation study comparing selection methods on synthetic data with meta-covariates'

    defaults = {
        'config': None,
        'out_dir': '.',
        'n': 100,
        'p': 60,
        'q': 2,
        'scenario': None,
        'omega0': BASELINE_OMEGA0,
        'omega1': 2.0,
        'omega2': 0.0,
        'reps': 1,
        'seed': None,
        'x_corr': 0.5,
        'meta_corr': 0.5,
        'methods': ','.join(HARNESS_METHODS),
        'sweeps': 1000,
        'burn_in': None,
        'em_iters': 10,
        'em_sweeps': None,
        'g_theta': 1.0,
        'variance': 'ig:0.01,0.01',
        'threshold': 0.95,
        'jobs': None,
    }

    def add_arguments(self, parser):
        self.add_config_arguments(parser)
        self.add_option(parser, '--n', 'Observations per replicate', type=int)
        self.add_option(parser, '--p', 'Covariates per replicate', type=int)
        self.add_option(parser, '--q', 'Meta-covariates besides the intercept', type=int)
        self.add_option(parser, '--scenario', 'Preset 1-5 setting omega1 to 2, 1, 0, 1.5 or 0.75', type=int,
                        choices=sorted(SCENARIO_OMEGA1))
        self.add_option(parser, '--omega0', 'True intercept of the inclusion model', type=float)
        self.add_option(parser, '--omega1', 'True coefficient of z1', type=float)
        self.add_option(parser, '--omega2', 'True coefficient of z2', type=float)
        self.add_option(parser, '--reps', 'Number of replicates', type=int)
        self.add_option(parser, '--seed', 'Random seed (required)', type=int)
        self.add_option(parser, '--x-corr', 'Pairwise correlation of the covariates', type=float)
        self.add_option(parser, '--meta-corr', 'Pairwise correlation of the meta-covariates', type=float)
        self.add_option(parser, '--methods', 'Comma-separated methods')
        self.add_option(parser, '--sweeps', 'Gibbs sweeps for the final posterior', type=int)
        self.add_option(parser, '--burn-in', 'Sweeps discarded (10%% of --sweeps when unset)', type=int)
        self.add_option(parser, '--em-iters', 'Maximum EM iterations', type=int)
        self.add_option(parser, '--em-sweeps', 'Gibbs sweeps per EM iteration (defaults to --sweeps)', type=int)
        self.add_option(parser, '--g-theta', 'Zellner prior scale g', type=float)
        self.add_option(parser, '--variance', 'Error variance: known:<phi> or ig:<a0>,<b0>')
        self.add_option(parser, '--threshold', 'Posterior inclusion probability selection threshold', type=float)
        self.add_option(parser, '--jobs', 'Worker processes (SIMULATION_JOBS when unset)', type=int)

    def scenario(self, options) -> ScenarioConfig:
        common = dict(
            n=options['n'], p=options['p'], x_corr=options['x_corr'], meta_corr=options['meta_corr'],
            n_reps=options['reps'], seed=options['seed'], pip_threshold=options['threshold'],
        )
        if options['scenario'] is not None:
            return ScenarioConfig.preset(options['scenario'], q=options['q'], **common)
        q = options['q']
        omega = np.zeros(q + 1)
        given = [options['omega0'], options['omega1'], options['omega2']]
        omega[:min(q + 1, 3)] = given[:min(q + 1, 3)]
        return ScenarioConfig(q=q, omega_true=omega, label='custom', **common)

    def run(self, options):
        self.require_seed(options)
        methods = [m.strip() for m in options['methods'].split(',') if m.strip()]
        if not methods:
            raise InvalidHyper('--methods lists no method')
        cfg = self.scenario(options)
        fit_settings = replace(
            HARNESS_SETTINGS,
            zellner=self.zellner(options),
            sweeps=options['sweeps'],
            burn_in=options['burn_in'],
            em_iters=options['em_iters'],
            em_sweeps=options['em_sweeps'],
            e_step='gibbs',
        )
        jobs = options['jobs'] or settings.SIMULATION_JOBS
        out = self.out_dir(options)

        self.stdout.write(f'🎲 {cfg.label}: {cfg.n_reps} replicates of n = {cfg.n}, p = {cfg.p} '
                          f'with {", ".join(methods)} on {jobs} worker(s)')
        result = run_scenario(cfg, methods, fit_settings, n_jobs=jobs)

        frame = result.metrics_frame()
        write_csv(frame, out / 'metrics.csv')
        if result.errors:
            write_csv(result.errors_frame(), out / 'errors.csv')
            self.stdout.write(self.style.WARNING(f'⚠️  {len(result.errors)} fits failed; see errors.csv'))

        write_summary({
            'scenario': cfg.label,
            'n': cfg.n,
            'p': cfg.p,
            'q': cfg.q,
            'omega_true': ','.join(repr(float(w)) for w in cfg.omega_true),
            'reps': cfg.n_reps,
            'seed': cfg.seed,
            'methods': ','.join(methods),
            'failed_fits': len(result.errors),
        }, out / 'summary.txt')

        means = frame[frame['rep'] == 'mean']
        for _, row in means.iterrows():
            self.stdout.write(f"   {row['method']}: mse {row['mse']:.4f}, power {row['power']:.3f}, fdr {row['fdr']:.3f}")
        self.stdout.write(self.style.SUCCESS(f'✅ Metrics written to {out / "metrics.csv"}'))
