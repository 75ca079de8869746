import pandas as pd

from selection.management.base import FitCommand
from selection.services.pipeline import fit_method
from selection.services.tables import write_csv, write_summary


class Command(FitCommand):
    help = 'Fit a Bayesian variable selection model with meta-covariate informed prior inclusion probabilities'

    def add_arguments(self, parser):
        self.add_fit_arguments(parser)

    def run(self, options):
        seed = self.require_seed(options)
        dataset, meta = self.load_inputs(options)
        settings = self.fit_settings(options)
        out = self.out_dir(options)
        method = options['method']

        self.stdout.write(f'📊 Fitting {method} on n = {dataset.n}, p = {dataset.p}, q = {meta.q}')
        fit = fit_method(method, dataset, meta, settings, seed)

        names = list(dataset.names)
        write_csv(pd.DataFrame({'name': names, 'pip': fit.pip, 'bma_coef': fit.bma_coef}), out / 'pips.csv')
        write_csv(pd.DataFrame({'name': names, 'bma_coef': fit.bma_coef,
                                'ci_low': fit.ci_low, 'ci_high': fit.ci_high}), out / 'bma.csv')
        write_csv(pd.DataFrame({'name': names, 'prior_prob': fit.prior_probs}), out / 'prior.csv')

        terms, values = [], []
        if fit.omega is not None:
            terms, values = list(fit.omega_names), list(fit.omega)
            if fit.g_omega is not None:
                terms.append('g_omega')
                values.append(fit.g_omega)
        write_csv(pd.DataFrame({'term': terms, 'omega': pd.Series(values, dtype=float)}), out / 'omega.csv')

        if fit.two_step is not None:
            result = fit.two_step
            write_csv(pd.DataFrame({
                'block': list(result.blocks.names),
                'size': result.blocks.block_sizes,
                'omega0': result.omega0,
                'omega1': result.omega1,
                'kappa0': result.kappa0,
                'kappa1': result.kappa1,
            }), out / 'blocks.csv')

        selected = int((fit.pip >= options['threshold']).sum())
        summary = {
            'method': method,
            'n': dataset.n,
            'p': dataset.p,
            'q': meta.q,
            'seed': seed,
            'e_step': 'exact' if fit.exact else 'gibbs',
            'g_theta': float(settings.zellner.g_theta),
            'variance': options['variance'],
            'standardized': settings.standardize,
            'threshold': float(options['threshold']),
            'selected': selected,
            'models_averaged': fit.n_models,
        }
        if fit.g_omega is not None:
            summary['g_omega'] = float(fit.g_omega)
        if fit.em_trace is not None:
            summary['em_iterations'] = fit.em_trace.iterations
            summary['em_converged'] = fit.em_trace.converged
        if fit.block_gibbs is not None:
            summary['omega_acceptance_rate'] = float(fit.block_gibbs.acceptance_rate)
        write_summary(summary, out / 'summary.txt')

        if fit.converged is False:
            self.stdout.write(self.style.WARNING('⚠️  EM stopped before omega settled; see the log for details'))
        self.stdout.write(self.style.SUCCESS(
            f'✅ {selected} of {dataset.p} covariates have pip >= {options["threshold"]}; results in {out}'
        ))
