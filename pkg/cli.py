#!/usr/bin/env python3
"""
hamogen: command-line entry point for simulation, dataset generation, training and evaluation.

Exit codes: 0 success, 1 runtime failure, 2 invalid config or usage.
Failures print one JSON object on stderr and every run leaves run_status.json in its output directory.
"""

import os
import sys
import csv
import json
import logging
import argparse
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence

import numpy as np

from analytic_systems import InitSampler, SystemKind, SystemSpec, make_system, sample_initial
from autodiff_net import AdamHyper
from cyclic_loss import effective_dimension_report
from errors import ConfigError, HamogenError
from evaluation import (energy_report, latent_cyclic_report, latent_energy_drift, motion_manifold_report,
                        rollout_error_report, write_curves_csv, write_report)
from hgan_trainer import (GanModel, GanTrainConfig, HganTrainer, generate_video, generated_latents,
                          grid_search_lambda, load_gan)
from hnn import (HnnTrainConfig, LossMode, derivative_mse, derivative_pairs, load_hnn, save_hnn,
                 train_hnn)
from integrators import DEFAULT_DT, IntegratorConfig, rollout
from phase_core import PhaseState, Trajectory
from renderer_dataset import (RenderConfig, VideoDataset, dataset_hash, export_png_strip, generate_dataset,
                              load_dataset, load_datasets, write_frames)
from settings import configure_logging, load_run_config, write_resolved_config

logger = logging.getLogger(__name__)

STATUS_FILE = 'run_status.json'
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

DATASET_DEFAULTS = {
    'system': 'pendulum',
    'params': {},
    'seed': 0,
    'count': 512,
    'frames': 64,
    'dt': DEFAULT_DT,
    'energy_range': None,
    'radius_range': None,
    'min_separation': 0.5,
    'screen_steps': 512,
    'max_drift': 1e-3,
    'param_ranges': {},
    'render': {},
}

HNN_DEFAULTS = {
    'loss_mode': 'derivative_match',
    'targets': 'analytic',
    'horizon': 4,
    'batch_size': 200,
    'epochs': 300,
    'lr': 1e-3,
    'beta1': 0.9,
    'beta2': 0.999,
    'seed': 0,
    'hidden': [64, 64],
    'activation': 'tanh',
    'dt': DEFAULT_DT,
    'log_every': 50,
    'heldout_fraction': 0.1,
}

HGAN_DEFAULTS = {
    'variant': 'hgan',
    'k': 2,
    'd_c': 10,
    'noise_dim': 10,
    'hidden': 64,
    'hnn_hidden': [64, 64],
    'dt': DEFAULT_DT,
    'batch_size': 16,
    'steps': 500,
    'n_frames': 16,
    'window': 16,
    'lam': 0.01,
    'cyclic_mode': 'sequence',
    'cyclic_updates_f': True,
    'lr': 2e-4,
    'beta1': 0.5,
    'beta2': 0.999,
    'seed': 0,
    'log_every': 50,
    'sample_every': 0,
    'sample_count': 4,
    'checkpoint_every': 0,
    'preload': True,
    'hnn_init': None,
}

MODEL_KEYS = ('k', 'd_c', 'noise_dim', 'hidden', 'hnn_hidden', 'dt')


class UsageError(ConfigError):
    """Bad command-line arguments"""


class JsonArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as ConfigError instead of exiting"""

    def error(self, message):
        raise UsageError(message)


def _write_status(out_dir: Optional[str], command: str, success: bool, message: str):
    if not out_dir:
        return
    try:
        os.makedirs(out_dir, exist_ok=True)
        status = {
            'command': command,
            'success': success,
            'message': message,
            'finished_at': datetime.now(timezone.utc).isoformat(),
        }
        with open(os.path.join(out_dir, STATUS_FILE), 'w') as f:
            json.dump(status, f, indent=2)
    except OSError as e:
        logger.warning(f"Could not write status file: {e}")


def _sampler_from_config(config: Dict) -> InitSampler:
    return InitSampler.from_dict({
        'seed': config['seed'],
        'energy_range': config['energy_range'],
        'radius_range': config['radius_range'],
        'min_separation': config['min_separation'],
        'param_ranges': config['param_ranges'],
        'screen_steps': config['screen_steps'],
        'screen_dt': config['dt'],
        'max_drift': config['max_drift'],
    })


def _render_from_config(config: Dict) -> RenderConfig:
    try:
        return RenderConfig.from_dict(config['render'])
    except TypeError as e:
        raise ConfigError(f"Invalid render config: {e}")


def _hyper(config: Dict) -> AdamHyper:
    return AdamHyper(lr=config['lr'], beta1=config['beta1'], beta2=config['beta2'])


# subcommands

def cmd_simulate(args) -> str:
    spec = SystemSpec(SystemKind.parse(args.system), {})
    field = make_system(spec)
    s0 = sample_initial(spec, InitSampler(seed=args.seed, screen_dt=args.dt))
    cfg = IntegratorConfig(dt=args.dt, n_steps=args.steps, scheme=args.scheme)
    traj = rollout(field, s0, cfg)
    report = energy_report(field, traj)
    output = {
        'schema_version': 1,
        'system': spec.to_dict(),
        'seed': args.seed,
        'scheme': cfg.scheme.value,
        'trajectory': traj.to_dict(),
        'energy': report.to_dict(),
    }
    directory = os.path.dirname(args.out)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(args.out, 'w') as f:
        json.dump(output, f, indent=2, sort_keys=True)
    write_resolved_config(directory or '.', {'system': spec.kind.value, 'seed': args.seed, 'dt': args.dt,
                                             'steps': args.steps, 'scheme': cfg.scheme.value})
    return f"{len(traj)} states written to {args.out}, max relative drift {report.max_rel_drift:.3e}"


def cmd_dataset(args) -> str:
    config = load_run_config(args.config, DATASET_DEFAULTS, 'dataset')
    spec = SystemSpec(SystemKind.parse(config['system']), config['params'])
    dataset = generate_dataset(spec, _sampler_from_config(config), _render_from_config(config),
                               config['count'], config['frames'], args.out, dt=config['dt'], show_progress=True)
    write_resolved_config(args.out, config)
    return f"{len(dataset)} trajectories written to {args.out} (sha256 {dataset_hash(args.out)[:12]})"


def _trajectories_from_dataset(dataset: VideoDataset) -> List[Trajectory]:
    """Re-integrate the simulated states behind every video from the manifest"""
    base = SystemSpec.from_dict(dataset.manifest['system'])
    trajs = []
    for entry in dataset.entries:
        spec = SystemSpec(base.kind, entry['params'])
        s0 = PhaseState(entry['initial_state']['q'], entry['initial_state']['p'])
        cfg = IntegratorConfig(dt=dataset.dt, n_steps=dataset.frames_per_trajectory - 1)
        trajs.append(rollout(make_system(spec), s0, cfg))
    return trajs


def _load_training_trajectories(path: str):
    """(trajectories, analytic field or None) from a dataset directory or a simulate output"""
    if os.path.isdir(path):
        dataset = load_dataset(path)
        spec = SystemSpec.from_dict(dataset.manifest['system'])
        varied = any(entry['params'] != spec.params for entry in dataset.entries)
        return _trajectories_from_dataset(dataset), None if varied else make_system(spec)
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read trajectory file {path}: {e}")
    traj_data = data['trajectory']
    traj = Trajectory.from_arrays(np.asarray(traj_data['q']), np.asarray(traj_data['p']), traj_data['dt'])
    return [traj], make_system(SystemSpec.from_dict(data['system']))


def cmd_train_hnn(args) -> str:
    config = load_run_config(args.config, HNN_DEFAULTS, 'train-hnn')
    cfg = HnnTrainConfig(loss_mode=config['loss_mode'], horizon=config['horizon'],
                         batch_size=config['batch_size'], epochs=config['epochs'], hyper=_hyper(config),
                         seed=config['seed'], hidden=tuple(config['hidden']), activation=config['activation'],
                         dt=config['dt'], log_every=config['log_every'], show_progress=True)
    trajs, field = _load_training_trajectories(args.data)

    rng = np.random.default_rng(config['seed'])
    order = rng.permutation(len(trajs))
    heldout_count = int(len(trajs) * config['heldout_fraction'])
    heldout = [trajs[i] for i in order[:heldout_count]]
    train = [trajs[i] for i in order[heldout_count:]]
    if not train:
        raise ConfigError("No training trajectories left after the held-out split")

    if cfg.loss_mode == LossMode.DERIVATIVE_MATCH and config['targets'] == 'analytic' and field is not None:
        data = derivative_pairs(field, [s for traj in train for s in traj.states])
    else:
        data = train
    result = train_hnn(data, cfg)

    metadata = {'train_config': cfg.to_dict(), 'final_loss': result.loss_history[-1] if result.loss_history else None}
    if heldout and field is not None:
        metadata['heldout_derivative_mse'] = derivative_mse(
            result.model, derivative_pairs(field, [s for traj in heldout for s in traj.states]))
    save_hnn(result.model, args.out, metadata)
    with open(os.path.join(args.out, 'loss_history.csv'), 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['batch', 'loss'])
        for i, loss in enumerate(result.loss_history):
            writer.writerow([i + 1, repr(loss)])
    write_resolved_config(args.out, config)
    return f"HNN trained for {cfg.epochs} epochs, final loss {metadata['final_loss']}"


def _gan_config(config: Dict) -> GanTrainConfig:
    hyper = _hyper(config)
    return GanTrainConfig(batch_size=config['batch_size'], steps=config['steps'], n_frames=config['n_frames'],
                          window=config['window'], lam=config['lam'], cyclic_mode=config['cyclic_mode'],
                          cyclic_updates_f=config['cyclic_updates_f'], d_hyper=hyper, g_hyper=hyper,
                          f_hyper=hyper, h_hyper=hyper, seed=config['seed'], variant=config['variant'],
                          log_every=config['log_every'], sample_every=config['sample_every'],
                          sample_count=config['sample_count'], checkpoint_every=config['checkpoint_every'],
                          show_progress=True)


def _model_kwargs(config: Dict) -> Dict:
    kwargs = {key: config[key] for key in MODEL_KEYS}
    kwargs['hnn_hidden'] = tuple(kwargs['hnn_hidden'])
    return kwargs


def cmd_train_hgan(args) -> str:
    config = load_run_config(args.config, HGAN_DEFAULTS, 'train-hgan')
    cfg = _gan_config(config)
    data = load_datasets(args.data)
    if config['preload']:
        data.preload()
    if args.resume:
        trainer = HganTrainer.resume(args.resume, data, cfg, args.out)
    else:
        model = GanModel.create(frame_shape=data.frame_shape, window=cfg.window, variant=cfg.variant,
                                seed=cfg.seed, **_model_kwargs(config))
        if config['hnn_init']:
            hamiltonian, _ = load_hnn(config['hnn_init'])
            model = model.with_hamiltonian(hamiltonian)
            logger.info(f"Starting from pretrained H_θ in {config['hnn_init']}")
        trainer = HganTrainer(model, data, cfg, args.out)
    history = trainer.train()
    trainer.save(args.out)
    write_resolved_config(args.out, config)
    last = history[-1] if history else {}
    return f"Trained to step {trainer.step}; last d_loss {last.get('d_loss')}, g_loss {last.get('g_loss')}"


def cmd_rollout(args) -> str:
    model, _ = load_gan(args.ckpt)
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    latents = {}
    for i in range(args.count):
        z_c = rng.standard_normal(model.d_c)
        z_m = rng.standard_normal(model.noise_dim)
        video = generate_video(model, z_c, z_m, args.frames, reverse=args.reverse)
        write_frames(os.path.join(args.out, f'video_{i:03d}.hgf'), video.frames)
        export_png_strip(video.frames, os.path.join(args.out, f'video_{i:03d}.png'))
        latents[f'video_{i:03d}'] = video.latents.to_dict()
    with open(os.path.join(args.out, 'latents.json'), 'w') as f:
        json.dump(latents, f, indent=2, sort_keys=True)
    write_resolved_config(args.out, {'ckpt': args.ckpt, 'seed': args.seed, 'frames': args.frames,
                                     'count': args.count, 'reverse': args.reverse})
    return f"{args.count} videos of {args.frames} frames written to {args.out}"


def _eval_gan(args) -> Dict:
    model, manifest = load_gan(args.ckpt)
    latents = generated_latents(model, args.count, max(args.frames, 2), seed=args.seed)
    report = {
        'model': 'gan',
        'variant': model.variant.value,
        'energy': {'max_rel_drift': latent_energy_drift(model.hamiltonian, latents), 'frames': int(latents.shape[0])},
        'cyclic': latent_cyclic_report(model.hamiltonian, latents, args.tau),
        'manifold': motion_manifold_report(latents, args.variance_fraction),
        'step': manifest.get('step'),
    }
    report['cyclic_count'] = report['cyclic']['cyclic_count']
    return report


def _eval_hnn(args) -> Dict:
    model, _ = load_hnn(args.ckpt)
    report = {'model': 'hnn'}
    if not args.data:
        return report
    dataset = load_dataset(args.data[0])
    trajs = _trajectories_from_dataset(dataset)
    spec = SystemSpec.from_dict(dataset.manifest['system'])
    cfg = IntegratorConfig(dt=dataset.dt, n_steps=args.steps)
    starts = [traj.states[0] for traj in trajs[:args.count]]
    own = [rollout(model, s, cfg) for s in starts]
    report['energy'] = {'max_rel_drift': max(energy_report(model, traj).max_rel_drift for traj in own)}
    report['cyclic'] = effective_dimension_report(trajs, model, args.tau).to_dict()
    report['cyclic_count'] = report['cyclic']['cyclic_count']
    report['rollout_error'] = rollout_error_report(model, make_system(spec), starts, cfg)
    if args.curves:
        write_curves_csv(args.curves, {'mean_error': report['rollout_error']['mean_curve'],
                                       'max_error': report['rollout_error']['max_curve']}, dt=cfg.dt)
    return report


def cmd_eval(args) -> str:
    if os.path.exists(os.path.join(args.ckpt, 'model.json')):
        report = _eval_gan(args)
    elif os.path.exists(os.path.join(args.ckpt, 'hnn.json')):
        report = _eval_hnn(args)
    else:
        raise ConfigError(f"{args.ckpt} holds neither a GAN nor an HNN checkpoint")
    if args.data:
        report['data'] = [{'root': root, 'sha256': dataset_hash(root)} for root in args.data]
    write_report(args.report, report)
    write_resolved_config(os.path.dirname(args.report) or '.', {
        'ckpt': args.ckpt, 'data': list(args.data), 'seed': args.seed, 'count': args.count,
        'frames': args.frames, 'steps': args.steps, 'tau': args.tau,
        'variance_fraction': args.variance_fraction, 'curves': args.curves,
    })
    return f"Report written to {args.report}"


def cmd_sweep_lambda(args) -> str:
    config = load_run_config(args.config, HGAN_DEFAULTS, 'sweep-lambda')
    cfg = _gan_config(config)
    data = load_datasets(args.data)
    if config['preload']:
        data.preload()
    results = grid_search_lambda(data, cfg, _model_kwargs(config), args.lambdas, tau=args.tau)
    write_report(os.path.join(args.out, 'lambda_sweep.json'), {'results': results})
    write_resolved_config(args.out, config)
    best = min(results, key=lambda r: (r['effective_dimension'], r['final_g_loss'] or 0.0))
    return f"Swept λ over {list(args.lambdas)}; smallest effective dimension at λ={best['lam']}"


def build_parser() -> argparse.ArgumentParser:
    parser = JsonArgumentParser(prog='hamogen', description='Hamiltonian generative dynamics toolkit')
    parser.add_argument('--log-level', default=None, help='overrides HAMOGEN_LOG_LEVEL')
    sub = parser.add_subparsers(dest='command', parser_class=JsonArgumentParser)
    sub.required = True

    p = sub.add_parser('simulate', help='integrate an analytic system and dump the trajectory')
    p.add_argument('--system', required=True, choices=[k.value for k in SystemKind])
    p.add_argument('--dt', type=float, default=DEFAULT_DT)
    p.add_argument('--steps', type=int, default=256)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--scheme', default='leapfrog', choices=['leapfrog', 'euler', 'rk4'])
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_simulate, out_dir=lambda a: os.path.dirname(a.out) or '.')

    p = sub.add_parser('dataset', help='generate a rendered video dataset')
    p.add_argument('--config', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_dataset, out_dir=lambda a: a.out)

    p = sub.add_parser('train-hnn', help='supervised training of a learned Hamiltonian')
    p.add_argument('--data', required=True, help='dataset directory or simulate output')
    p.add_argument('--config', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_train_hnn, out_dir=lambda a: a.out)

    p = sub.add_parser('train-hgan', help='adversarial training of the full pipeline')
    p.add_argument('--data', required=True, nargs='+', help='one or more dataset directories')
    p.add_argument('--config', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--resume', default=None, help='checkpoint directory to continue from')
    p.set_defaults(func=cmd_train_hgan, out_dir=lambda a: a.out)

    p = sub.add_parser('rollout', help='generate videos from a GAN checkpoint')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--frames', type=int, default=16)
    p.add_argument('--count', type=int, default=1)
    p.add_argument('--reverse', action='store_true', help='integrate the motion backwards in time')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_rollout, out_dir=lambda a: a.out)

    p = sub.add_parser('eval', help='energy, cyclic, manifold and rollout-error reports')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', nargs='*', default=[])
    p.add_argument('--report', required=True)
    p.add_argument('--curves', default=None, help='optional CSV of error curves')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--count', type=int, default=1024)
    p.add_argument('--frames', type=int, default=16)
    p.add_argument('--steps', type=int, default=64)
    p.add_argument('--tau', type=float, default=0.05)
    p.add_argument('--variance-fraction', type=float, default=0.95)
    p.set_defaults(func=cmd_eval, out_dir=lambda a: os.path.dirname(a.report) or '.')

    p = sub.add_parser('sweep-lambda', help='short training run per cyclic-loss weight')
    p.add_argument('--data', required=True, nargs='+')
    p.add_argument('--config', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--lambdas', type=float, nargs='+', default=[0.1, 0.01, 0.001])
    p.add_argument('--tau', type=float, default=0.05)
    p.set_defaults(func=cmd_sweep_lambda, out_dir=lambda a: a.out)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    out_dir = None
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        out_dir = args.out_dir(args)
        configure_logging(args.log_level)
        logger.info(f"Starting hamogen {command}")
        message = args.func(args)
        logger.info(message)
        _write_status(out_dir, command, True, message)
        return EXIT_OK
    except ConfigError as e:
        code, error = EXIT_USAGE, e
    except HamogenError as e:
        code, error = EXIT_RUNTIME, e
    except Exception as e:
        code, error = EXIT_RUNTIME, HamogenError(f"{type(e).__name__}: {e}")

    logger.error(f"{command or 'hamogen'} failed: {error}")
    print(json.dumps(error.to_dict()), file=sys.stderr)
    _write_status(out_dir, command or '', False, str(error))
    return code


if __name__ == "__main__":
    sys.exit(main())
