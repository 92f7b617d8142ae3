"""Stage-gated pipeline commands.

``gen-data -> train-base -> train-detector -> train-guidance -> eval``, plus
``sample``. Every stage reads its inputs from the directories named in the
run config and writes checkpoints / reports with a fingerprint sidecar.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import RunConfig
from .detection import DetectLossConfig, Detector, DetectorTrainConfig, resize_mask, train_detector
from .diffusion import BaseTrainConfig, DenoiserConfig, DenoiserParams, NoiseSchedule, sample, train_base_model
from .errors import ConfigError, MissingCheckpointError
from .evaluation import run_ablation_table, run_localization, run_safety, run_timestep_sweep
from .io import load_checkpoint, read_csv, save_checkpoint, write_csv, write_pgm, write_ppm, mask_to_uint8
from .plotting import overlay, plot_report, sample_grid
from .preference import DPOConfig, PreferencePair, make_preference_pairs, train_guidance
from .scenes import MANIFEST_COLUMNS, ConceptVocabulary, decode_latent, make_dataset, random_scene, render, to_latent
from .suppression import GuidanceParams, SuppressionConfig, install_controller

log = logging.getLogger("maskguard")

EXPERIMENTS = ("localization", "sweep", "safety", "ablation")
STAGES = {"base": "base.sckt", "detector": "detector.sckt", "guidance": "guidance.sckt"}


# ---------------------------------------------------------------------------
# helpers


def _schedule(cfg: RunConfig) -> NoiseSchedule:
    m = cfg.model
    return NoiseSchedule(T=m.T, beta_start=m.beta_start, beta_end=m.beta_end)


def _model_config(cfg: RunConfig, vocab: ConceptVocabulary) -> DenoiserConfig:
    m = cfg.model
    return DenoiserConfig(channels=m.channels, height=m.height, width=m.width, hidden=m.hidden,
                          text_dim=m.text_dim, vocab_size=len(vocab), n_blocks=m.n_blocks, n_attn=m.n_attn)


def _write_fingerprint(path: Path, cfg: RunConfig) -> None:
    path.with_name(path.name + ".fingerprint").write_text(cfg.fingerprint() + "\n")


def _ckpt_path(cfg: RunConfig, stage: str) -> Path:
    return Path(cfg.paths.checkpoint_dir) / STAGES[stage]


def _load_stage(cfg: RunConfig, stage: str):
    path = _ckpt_path(cfg, stage)
    if not path.is_file():
        raise MissingCheckpointError(stage, str(path))
    return load_checkpoint(path)


def load_base(cfg: RunConfig) -> DenoiserParams:
    return DenoiserParams.from_checkpoint(_load_stage(cfg, "base"))


def load_detector(cfg: RunConfig, vocab: ConceptVocabulary) -> Detector:
    return Detector.from_checkpoint(_load_stage(cfg, "detector"), vocab.concept_names)


def load_guidance(cfg: RunConfig) -> GuidanceParams:
    return GuidanceParams.from_checkpoint(_load_stage(cfg, "guidance"))


def _data_files(cfg: RunConfig) -> dict[str, Path]:
    d = Path(cfg.paths.data_dir)
    return {"manifest": d / "dataset.csv", "tensors": d / "dataset.sckt",
            "pairs_manifest": d / "pairs.csv", "pairs": d / "pairs.sckt"}


def load_scenes(cfg: RunConfig, vocab: ConceptVocabulary, split: str | None = None):
    """Rebuild rendered scenes from the manifest; scenes are a pure function of their seed."""
    path = _data_files(cfg)["manifest"]
    if not path.is_file():
        raise MissingCheckpointError("data", str(path))
    out = []
    for row in read_csv(path):
        if split is not None and row["split"] != split:
            continue
        scene = render(random_scene(int(row["seed"]), vocab, cfg.data.hazard_rate), vocab)
        if (scene.hazard or "none") != row["hazard"]:
            raise ConfigError("dataset manifest does not match data.hazard_rate", key="data.hazard_rate")
        out.append(scene)
    return out


def few_shot(scenes, vocab: ConceptVocabulary, shots: int):
    picked = []
    for name in vocab.concept_names:
        hits = [s for s in scenes if s.hazard == name]
        if len(hits) < shots:
            raise ConfigError(f"only {len(hits)} training scenes for {name!r}", key="detection.shots")
        picked += hits[:shots]
    return picked


def _tensors(path: Path, stage: str):
    if not path.is_file():
        raise MissingCheckpointError(stage, str(path))
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> list[Path]:
    vocab = ConceptVocabulary()
    ds = make_dataset(cfg.data.n_scenes, vocab, cfg.seeds.data, cfg.data.hazard_rate, cfg.data.test_fraction)
    files = _data_files(cfg)
    files["manifest"].parent.mkdir(parents=True, exist_ok=True)
    images, masks = Path(cfg.paths.data_dir) / "images", Path(cfg.paths.data_dir) / "masks"
    rows = []
    for row, scene in zip(ds.manifest_rows(), ds.scenes):
        img, mask = images / f"scene_{int(row[0]):05d}.ppm", masks / f"scene_{int(row[0]):05d}.pgm"
        write_ppm(img, scene.rgb)
        hazard = scene.concept_mask(scene.hazard) if scene.hazard else np.zeros(scene.rgb.shape[:2], bool)
        write_pgm(mask, hazard.astype(np.uint8) * 255)
        rows.append(row + [str(img.relative_to(cfg.paths.data_dir)), str(mask.relative_to(cfg.paths.data_dir))])
    write_csv(files["manifest"], list(MANIFEST_COLUMNS) + ["image_path", "mask_path"], rows)
    n_c = cfg.model.channels
    lat = np.stack([to_latent(s.image(), n_c) for s in ds.scenes])
    toks = np.array([vocab.encode(s.prompt) for s in ds.scenes], dtype=np.float64)
    save_checkpoint(files["tensors"], {"latents": lat, "tokens": toks})
    pairs = make_preference_pairs(cfg.data.n_pairs, vocab, cfg.seeds.data + 1, n_c)
    write_csv(files["pairs_manifest"], ["pair_id", "seed", "prompt_tokens", "concept"],
              [[i, p.scene_l.spec.seed, " ".join(map(str, p.tokens)), p.scene_l.hazard] for i, p in enumerate(pairs)])
    save_checkpoint(files["pairs"], {"y_w": np.stack([p.y_w for p in pairs]),
                                     "y_l": np.stack([p.y_l for p in pairs]),
                                     "tokens": np.stack([p.tokens for p in pairs]).astype(np.float64)})
    for p in files.values():
        _write_fingerprint(p, cfg)
    log.info("dataset: %s", ds.concept_counts())
    return list(files.values())


def cmd_train_base(cfg: RunConfig, args) -> list[Path]:
    vocab = ConceptVocabulary()
    data = _tensors(_data_files(cfg)["tensors"], "data")
    manifest = read_csv(_data_files(cfg)["manifest"])
    train = np.array([r["split"] == "train" for r in manifest])
    lat, toks = data["latents"].data[train], data["tokens"].data[train].astype(np.int64)
    tc = BaseTrainConfig(steps=cfg.train.steps, batch=cfg.train.batch, lr=cfg.train.lr, seed=cfg.seeds.base,
                         log_every=max(1, cfg.train.steps // 20))
    params, curve = train_base_model(lat, toks, _schedule(cfg), _model_config(cfg, vocab), tc,
                                     progress=lambda s, l: log.info("base step %d loss %.4f", s, l))
    return _save_stage(cfg, "base", params.to_checkpoint(), curve)


def _save_stage(cfg: RunConfig, stage: str, tensors, curve) -> list[Path]:
    path = _ckpt_path(cfg, stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, tensors)
    _write_fingerprint(path, cfg)
    curve_path = path.with_name(f"{stage}_loss.csv")
    write_csv(curve_path, ["step", "loss"], curve)
    _write_fingerprint(curve_path, cfg)
    return [path, curve_path]


def cmd_train_detector(cfg: RunConfig, args) -> list[Path]:
    vocab = ConceptVocabulary()
    base = load_base(cfg)
    d = cfg.detection
    shots = few_shot(load_scenes(cfg, vocab, "train"), vocab, d.shots)
    tc = DetectorTrainConfig(epochs=d.epochs, lr=d.lr, max_t_fraction=d.max_t_fraction, token_dim=d.token_dim,
                             attn_dim=d.attn_dim, layers=list(d.layers), seed=cfg.seeds.detector,
                             loss=DetectLossConfig(lambda_ce=d.lambda_ce, lambda_mse=d.lambda_mse))
    det, curve = train_detector(shots, base, _schedule(cfg), vocab, tc)
    return _save_stage(cfg, "detector", det.to_checkpoint(), curve)


def cmd_train_guidance(cfg: RunConfig, args) -> list[Path]:
    vocab = ConceptVocabulary()
    base = load_base(cfg)
    det = load_detector(cfg, vocab)
    data = _tensors(_data_files(cfg)["pairs"], "data")
    pairs = [PreferencePair(w, l, t.astype(np.int64))
             for w, l, t in zip(data["y_w"].data, data["y_l"].data, data["tokens"].data)]
    p = cfg.dpo
    dc = DPOConfig(beta=p.beta, lr=p.lr, epochs=p.epochs, batch=p.batch, max_t_fraction=p.max_t_fraction,
                   seed=cfg.seeds.dpo)
    guidance, curve = train_guidance(pairs, base, det, _schedule(cfg), dc)
    return _save_stage(cfg, "guidance", guidance.to_checkpoint(), curve)


def cmd_sample(cfg: RunConfig, args) -> list[Path]:
    vocab = ConceptVocabulary()
    base = load_base(cfg)
    schedule = _schedule(cfg)
    tokens = vocab.encode(args.prompt.split())
    seed = cfg.seeds.eval
    out = Path(args.out or Path(cfg.paths.report_dir) / "samples")
    out.mkdir(parents=True, exist_ok=True)
    mode = args.mode or cfg.suppression.mode
    controller = None
    if mode != "off":
        sc = SuppressionConfig(mode=mode, window=cfg.suppression.window, alpha=cfg.detection.alpha)
        controller = install_controller(base, load_detector(cfg, vocab), load_guidance(cfg), sc, schedule)
    res = sample(base, [tokens], schedule, [seed], controller=controller)
    img = decode_latent(res.latents[0])
    stem = f"sample_{mode}_{seed}"
    paths = [out / f"{stem}.ppm"]
    write_ppm(paths[0], img)
    if controller is not None and controller.final_mask is not None:
        grid = (base.config.height, base.config.width)
        size = img.shape[:2]
        mask = resize_mask(controller.final_mask, grid, size)[0].reshape(size)
        write_pgm(out / f"{stem}_mask.pgm", mask_to_uint8(mask))
        write_ppm(out / f"{stem}_overlay.ppm", overlay(img, mask))
        paths += [out / f"{stem}_mask.pgm", out / f"{stem}_overlay.ppm"]
    for p in paths:
        _write_fingerprint(p, cfg)
    return paths


def cmd_eval(cfg: RunConfig, args) -> list[Path]:
    vocab = ConceptVocabulary()
    experiments = EXPERIMENTS if args.experiment == "all" else (args.experiment,)
    out = Path(args.out or cfg.paths.report_dir)
    base = load_base(cfg)
    schedule = _schedule(cfg)
    fp = cfg.fingerprint()
    e = cfg.eval
    seed = cfg.seeds.eval
    det = load_detector(cfg, vocab)
    guid = load_guidance(cfg) if {"safety", "ablation"} & set(experiments) else None
    scenes = None
    if {"localization", "sweep"} & set(experiments):
        scenes = [s for s in load_scenes(cfg, vocab, "test") if s.hazard][:e.n_eval_scenes]
    written = []
    for name in experiments:
        if name == "localization":
            rep = run_localization(det, base, scenes, schedule, vocab, fp, e.late_fraction, seed=seed)
        elif name == "sweep":
            rep = run_timestep_sweep(det, base, scenes, schedule, vocab, fp, e.sweep_timesteps,
                                     e.late_fraction, e.early_fraction, seed=seed)
        elif name == "safety":
            rep = run_safety(base, det, guid, schedule, vocab, fp, e.n_safety_prompts, cfg.suppression.window,
                             cfg.detection.alpha, seed=seed)
        else:
            rep = run_ablation_table(base, det, guid, schedule, vocab, fp, e.n_ablation_seeds,
                                     cfg.suppression.window, cfg.detection.alpha, seed=seed + 1)
        written.append(rep.write(out))
        written.append(plot_report(rep, out))
        gens = getattr(rep, "generations", None)
        if gens is not None:
            rg = gens["region_guided"]
            tiles = gens["off"].images[:8] + rg.images[:8]
            if rg.masks is not None:
                tiles += [overlay(im, m) for im, m in zip(rg.images[:8], rg.masks[:8])]
            written.append(sample_grid(tiles, out / f"{rep.stem}_samples.png"))
        print(rep.summary().rstrip())
    return written


COMMANDS = {"gen-data": cmd_gen_data, "train-base": cmd_train_base, "train-detector": cmd_train_detector,
            "train-guidance": cmd_train_guidance, "sample": cmd_sample, "eval": cmd_eval}

_SEED_FIELD = {"gen-data": "data", "train-base": "base", "train-detector": "detector", "train-guidance": "dpo",
               "sample": "eval", "eval": "eval"}
_OUT_FIELD = {"gen-data": "data_dir", "train-base": "checkpoint_dir", "train-detector": "checkpoint_dir",
              "train-guidance": "checkpoint_dir"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config file (section.key = value lines)")
    common.add_argument("--seed", type=int, help="override the stage seed")
    common.add_argument("--out", type=Path, help="output directory for this command")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="maskguard", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train-base", "train-detector", "train-guidance"):
        sub.add_parser(name, parents=[common])
    sp = sub.add_parser("sample", parents=[common])
    sp.add_argument("--mode", choices=("off", "global", "region_guided"))
    sp.add_argument("--prompt", required=True, help="space-separated words, e.g. 'navy blaze'")
    ev = sub.add_parser("eval", parents=[common])
    ev.add_argument("--experiment", choices=EXPERIMENTS + ("all",), default="all")
    sub.add_parser("show-config", parents=[common])
    return parser


def _fail(code: int, kind: str, message: str, **fields) -> int:
    extra = "".join(f" {k}={v}" for k, v in fields.items())
    msg = " ".join(str(message).split())
    print(f"maskguard: error code={code} kind={kind}{extra} message={msg!r}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = cfgmod.load(args.config)
        if args.command in _SEED_FIELD and args.seed is not None:
            setattr(cfg.seeds, _SEED_FIELD[args.command], args.seed)
        if args.command in _OUT_FIELD and args.out is not None:
            setattr(cfg.paths, _OUT_FIELD[args.command], str(args.out))
        if args.command == "show-config":
            sys.stdout.write(cfg.dumps())
            print(f"# fingerprint {cfg.fingerprint()}")
            return 0
        for path in COMMANDS[args.command](cfg, args):
            print(path)
        return 0
    except MissingCheckpointError as e:
        return _fail(2, "missing-checkpoint", e, stage=e.stage, path=e.path)
    except ConfigError as e:
        return _fail(3, "config", e, key=e.key)
    except (ValueError, ArithmeticError, RuntimeError, OSError) as e:
        return _fail(1, type(e).__name__, e)


if __name__ == "__main__":
    sys.exit(main())
