"""
Shared plumbing for the selection management commands.

Option precedence: explicit flags, then the --config file (dotenv-style
`key = value` lines), then the command's defaults. Every SelectionError is
turned into a CommandError carrying the error's exit code.
"""

import argparse
import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError
from dotenv import dotenv_values

from selection.exceptions import MalformedInput, SelectionError
from selection.services.linmodel import InverseGamma, Known, ZellnerConfig
from selection.services.pipeline import E_STEPS, METHODS, FitSettings
from selection.services.tables import read_data_csv, read_meta_csv

logger = logging.getLogger(__name__)

TRUE_WORDS = {'1', 'true', 'yes', 'on'}
FALSE_WORDS = {'0', 'false', 'no', 'off'}


def parse_variance(text: str):
    """'known:<phi>' or 'ig:<a0>,<b0>'."""
    kind, _, rest = str(text).partition(':')
    try:
        values = [float(v) for v in rest.split(',')]
    except ValueError:
        values = []
    if kind == 'known' and len(values) == 1:
        return Known(values[0])
    if kind == 'ig' and len(values) == 2:
        return InverseGamma(*values)
    raise MalformedInput(f"--variance must be known:<phi> or ig:<a0>,<b0>, got {text!r}")


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    word = str(text).strip().lower()
    if word in TRUE_WORDS:
        return True
    if word in FALSE_WORDS:
        return False
    raise MalformedInput(f"Expected a boolean, got {text!r}")


class SelectionCommand(BaseCommand):
    """
    Base for commands whose options may also come from a config file.

    Subclasses fill `defaults` (option dest -> default) and implement run(options).
    """

    defaults = {}
    requires_system_checks = []

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        self._option_actions = {
            action.dest: action for action in parser._actions
            if action.option_strings and action.dest in self.defaults
        }
        return parser

    def add_option(self, parser, flag, help_text, **kwargs):
        """An option whose argparse default is None so later layers can fill it in."""
        dest = flag.lstrip('-').replace('-', '_')
        default = self.defaults.get(dest)
        shown = 'off' if kwargs.get('action') == 'store_true' else default
        parser.add_argument(flag, dest=dest, default=None, help=f"{help_text} (default: {shown})", **kwargs)

    def add_config_arguments(self, parser):
        self.add_option(parser, '--config', 'key = value settings file; flags override it')
        self.add_option(parser, '--out-dir', 'Directory for output files')

    def _from_file(self, path):
        if not Path(path).is_file():
            raise MalformedInput(f"Config file not found: {path}")
        values = {}
        for key, raw in dotenv_values(path).items():
            dest = key.strip().lstrip('-').replace('-', '_')
            action = self._option_actions.get(dest)
            if action is None or dest == 'config':
                raise MalformedInput(f"Unknown setting {key!r} in {path}")
            if raw is None:
                raise MalformedInput(f"Setting {key!r} in {path} has no value")
            if isinstance(action, argparse._StoreTrueAction):
                values[dest] = parse_bool(raw)
            elif action.type is not None:
                try:
                    values[dest] = action.type(raw)
                except (TypeError, ValueError):
                    raise MalformedInput(f"Bad value {raw!r} for {key!r} in {path}")
            else:
                values[dest] = raw
            if action.choices is not None and values[dest] not in action.choices:
                raise MalformedInput(f"{key} must be one of {list(action.choices)}, got {raw!r}")
        return values

    def resolve_options(self, options):
        resolved = dict(self.defaults)
        if options.get('config'):
            resolved.update(self._from_file(options['config']))
        for dest, value in options.items():
            if value is not None and value is not False or dest not in resolved:
                resolved[dest] = value
        return resolved

    def require_seed(self, options):
        if options.get('seed') is None:
            raise MalformedInput("A --seed is required for reproducible output")
        return options['seed']

    def zellner(self, options) -> ZellnerConfig:
        return ZellnerConfig(options['g_theta'], parse_variance(options['variance']))

    def out_dir(self, options) -> Path:
        path = Path(options['out_dir'])
        path.mkdir(parents=True, exist_ok=True)
        return path

    def handle(self, *args, **options):
        try:
            return self.run(self.resolve_options(options))
        except SelectionError as e:
            logger.error(f"{type(e).__name__}: {e}")
            raise CommandError(f"{type(e).__name__}: {e}", returncode=e.exit_code)

    def run(self, options):
        raise NotImplementedError


FIT_DEFAULTS = {
    'config': None,
    'out_dir': '.',
    'method': 'em-gibbs',
    'g_theta': 1.0,
    'variance': 'ig:0.01,0.01',
    'sweeps': 1000,
    'burn_in': None,
    'seed': None,
    'threshold': 0.95,
    'no_standardize': False,
    'center_meta': False,
    'g_omega': None,
    'em_iters': 20,
    'mh_step': 0.5,
    'e_step': 'auto',
}


class FitCommand(SelectionCommand):
    """Commands that read data.csv and meta.csv and fit one method."""

    defaults = FIT_DEFAULTS

    def add_fit_arguments(self, parser):
        parser.add_argument('data_csv', help='CSV with a y column followed by covariate columns')
        parser.add_argument('meta_csv', help='CSV with a covariate column followed by meta-covariate columns')
        self.add_config_arguments(parser)
        self.add_option(parser, '--method', 'Fitting method', choices=METHODS)
        self.add_option(parser, '--g-theta', 'Zellner prior scale g', type=float)
        self.add_option(parser, '--variance', 'Error variance: known:<phi> or ig:<a0>,<b0>')
        self.add_option(parser, '--sweeps', 'Gibbs sweeps over all covariates', type=int)
        self.add_option(parser, '--burn-in', 'Sweeps discarded (10%% of --sweeps when unset)', type=int)
        self.add_option(parser, '--seed', 'Random seed (required)', type=int)
        self.add_option(parser, '--threshold', 'Posterior inclusion probability selection threshold', type=float)
        self.add_option(parser, '--no-standardize', 'Fit on the raw covariates', action='store_true')
        self.add_option(parser, '--center-meta', 'Center meta-covariate columns before adding the intercept',
                        action='store_true')
        self.add_option(parser, '--g-omega', 'Hyperprior scale for omega (calibrated when unset)', type=float)
        self.add_option(parser, '--em-iters', 'Maximum EM iterations', type=int)
        self.add_option(parser, '--mh-step', 'Random-walk scale for omega updates (mcmc)', type=float)
        self.add_option(parser, '--e-step', 'Posterior inclusion probabilities by enumeration or Gibbs',
                        choices=E_STEPS)

    def fit_settings(self, options, interval_draws=4000):
        return FitSettings(
            zellner=self.zellner(options),
            sweeps=options['sweeps'],
            burn_in=options['burn_in'],
            em_iters=options['em_iters'],
            e_step=options['e_step'],
            g_omega=options['g_omega'],
            mh_step=options['mh_step'],
            standardize=not options['no_standardize'],
            interval_draws=interval_draws,
        )

    def load_inputs(self, options):
        dataset = read_data_csv(options['data_csv'])
        meta = read_meta_csv(options['meta_csv'], dataset.names, center=options['center_meta'])
        return dataset, meta
