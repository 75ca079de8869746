import numpy as np
import pandas as pd
from django.conf import settings

from selection.exceptions import InvalidHyper
from selection.management.base import SelectionCommand
from selection.services.ebayes import EmConfig, ExactEStep, em_fit
from selection.services.linmodel import LogMarginalCache, standardize
from selection.services.priors import (
    BetaBinomialPrior,
    FixedBernoulliPrior,
    HyperPrior,
    LogisticMetaPrior,
    log_model_prior_table,
)
from selection.services.sampler import enumerate_log_marginals, posterior_from_table
from selection.services.tables import read_data_csv, read_meta_csv, write_csv, write_summary

PRIORS = ('uniform', 'beta-binomial', 'em')


class Command(SelectionCommand):
    help = 'Exact posterior over every model (p <= ENUMERATION_MAX_P)'

    defaults = {
        'config': None,
        'out_dir': '.',
        'prior': 'uniform',
        'floor': 1e-6,
        'g_theta': 1.0,
        'variance': 'ig:0.01,0.01',
        'no_standardize': False,
        'center_meta': False,
        'g_omega': None,
        'em_iters': 50,
    }

    def add_arguments(self, parser):
        parser.add_argument('data_csv', help='CSV with a y column followed by covariate columns')
        parser.add_argument('meta_csv', help='CSV with a covariate column followed by meta-covariate columns')
        self.add_config_arguments(parser)
        self.add_option(parser, '--prior', 'Model prior; em fits omega by exact EM first', choices=PRIORS)
        self.add_option(parser, '--floor', 'Only models with posterior probability >= floor are written',
                        type=float)
        self.add_option(parser, '--g-theta', 'Zellner prior scale g', type=float)
        self.add_option(parser, '--variance', 'Error variance: known:<phi> or ig:<a0>,<b0>')
        self.add_option(parser, '--no-standardize', 'Fit on the raw covariates', action='store_true')
        self.add_option(parser, '--center-meta', 'Center meta-covariate columns before adding the intercept',
                        action='store_true')
        self.add_option(parser, '--g-omega', 'Hyperprior scale for omega with --prior em', type=float)
        self.add_option(parser, '--em-iters', 'Maximum EM iterations with --prior em', type=int)

    def run(self, options):
        if options['floor'] < 0:
            raise InvalidHyper(f"--floor cannot be negative, got {options['floor']}")
        dataset = read_data_csv(options['data_csv'])
        meta = read_meta_csv(options['meta_csv'], dataset.names, center=options['center_meta'])
        if not options['no_standardize']:
            dataset, _ = standardize(dataset)
        cfg_z = self.zellner(options)
        out = self.out_dir(options)

        cache = LogMarginalCache(max(settings.LOG_MARGINAL_CACHE_CAPACITY, 2 ** dataset.p))
        table = enumerate_log_marginals(dataset, cfg_z, settings.ENUMERATION_MAX_P, cache)
        summary = {'prior': options['prior'], 'n': dataset.n, 'p': dataset.p}
        if options['prior'] == 'uniform':
            prior = FixedBernoulliPrior.uniform(dataset.p)
        elif options['prior'] == 'beta-binomial':
            prior = BetaBinomialPrior(1.0, 1.0)
        else:
            hp = HyperPrior.from_meta(meta, options['g_omega'])
            trace = em_fit(dataset, meta, cfg_z, hp,
                           EmConfig(max_iters=options['em_iters'], e_step=ExactEStep(settings.ENUMERATION_MAX_P)), cache)
            prior = LogisticMetaPrior(meta, trace.omega)
            summary.update({f'omega_{name}': float(w) for name, w in zip(meta.names, trace.omega)})
            summary['g_omega'] = float(hp.g_omega)
        posterior = posterior_from_table(table, prior)

        log_prior = log_model_prior_table(prior, table.masks)
        keep = posterior.probs >= options['floor']
        bits = [''.join('1' if b else '0' for b in mask) for mask in table.masks[keep]]
        frame = pd.DataFrame({
            'model_bits': bits,
            'log_marginal': table.log_marginals[keep],
            'prior': np.exp(log_prior[keep]),
            'posterior': posterior.probs[keep],
        })
        frame = frame.sort_values('posterior', ascending=False, kind='stable')
        write_csv(frame, out / 'posterior.csv')
        write_csv(pd.DataFrame({'name': list(dataset.names), 'pip': posterior.pip}), out / 'pips.csv')

        summary['log_evidence'] = posterior.log_evidence
        summary['models_written'] = int(keep.sum())
        write_summary(summary, out / 'summary.txt')
        self.stdout.write(self.style.SUCCESS(
            f'✅ {int(keep.sum())} of {2 ** dataset.p} models written; log evidence {posterior.log_evidence:.10g}'
        ))
