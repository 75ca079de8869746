import pandas as pd

from selection.management.base import FitCommand
from selection.services.simulation import loocv
from selection.services.tables import write_csv, write_summary


class Command(FitCommand):
    help = 'Leave-one-out cross-validated R^2 of model-averaged predictions'

    def add_arguments(self, parser):
        self.add_fit_arguments(parser)

    def run(self, options):
        seed = self.require_seed(options)
        dataset, meta = self.load_inputs(options)
        settings = self.fit_settings(options, interval_draws=0)
        out = self.out_dir(options)

        self.stdout.write(f'🔁 Leave-one-out over {dataset.n} rows with {options["method"]}')
        result = loocv(dataset, meta, options['method'], settings, seed)

        write_csv(pd.DataFrame({
            'row': range(1, dataset.n + 1),
            'observed': result.observed,
            'predicted': result.predicted,
        }), out / 'predictions.csv')
        if result.omega_full is not None:
            write_csv(pd.DataFrame({
                'term': list(result.omega_names),
                'omega': result.omega_full,
                'ci_low': result.ci_low,
                'ci_high': result.ci_high,
            }), out / 'omega_jackknife.csv')
        write_summary({'method': options['method'], 'n': dataset.n, 'p': dataset.p, 'seed': seed,
                       'r2': result.r2}, out / 'summary.txt')

        self.stdout.write(self.style.SUCCESS(f'R2 = {result.r2:.17g}'))
