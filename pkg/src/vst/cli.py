"""``vst`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric abort.
"""
import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import dsp
from .config import load_config, resolve, write_resolved
from .errors import NumericError, PreconditionError, ValidationError, ConfigError
from .seeding import deterministic_requested, set_deterministic

log = logging.getLogger("vst")

COMMANDS = ("make-toy-data", "pretrain-audio-id", "train", "synthesize", "swap-style", "evaluate",
            "export-features")


_run_handlers = []


class JsonLinesHandler(logging.Handler):
    def __init__(self, path):
        super().__init__()
        self.fh = open(path, "a")

    def emit(self, record):
        entry = {"time": round(record.created, 3), "level": record.levelname, "logger": record.name,
                 "message": record.getMessage()}
        entry.update(getattr(record, "fields", {}))
        self.fh.write(json.dumps(entry) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()
        super().close()


def _start_run(out_dir, values, command):
    """Echo the resolved config and attach the machine-readable run log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(out_dir, dict(values, command=command))
    handler = JsonLinesHandler(out_dir / "run.log.jsonl")
    logging.getLogger("vst").addHandler(handler)
    _run_handlers.append(handler)
    log.info("start %s", command, extra={"fields": {"event": "start", "command": command}})


def _spectral_defaults():
    return asdict(dsp.SpectralParams())


def _spectral_from(values):
    return dsp.SpectralParams(**{f.name: values[f.name] for f in fields(dsp.SpectralParams)})


def _resolve(args, defaults, cli_keys):
    file_values = load_config(args.config) if args.config else {}
    # a config.resolved echo names its command; replaying it under another one is a mistake
    command = file_values.pop("command", args.command)
    if command != args.command:
        raise ConfigError(f"config file {args.config} was resolved for {command!r}, not {args.command!r}")
    cli = {k: getattr(args, k, None) for k in cli_keys}
    cli["seed"] = args.seed
    cli["workers"] = args.workers
    return resolve(defaults, file_values, cli)


def _require(values, key, flag):
    if values.get(key) in (None, ""):
        raise ConfigError(f"missing required {flag}")


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- commands -------------------------------------------------------------------

def cmd_make_toy_data(args):
    from .toydata import DatasetConfig, generate_dataset
    defaults = {"out": "", "subjects": 8, "per_subject": 64, "split": "independent", "seed": 1,
                "frames": 24, "size": 64, "workers": 1}
    v = _resolve(args, defaults, ("out", "subjects", "per_subject", "split", "frames", "size"))
    _require(v, "out", "--out")
    cfg = DatasetConfig(out_dir=v["out"], n_subjects=v["subjects"], clips_per_subject=v["per_subject"],
                        split_mode=v["split"], dataset_seed=v["seed"], n_frames=v["frames"],
                        height=v["size"], width=v["size"])
    manifest = generate_dataset(cfg)
    _start_run(v["out"], v, "make-toy-data")
    log.info("wrote %d clips %s", len(manifest.entries), manifest.counts)


def cmd_pretrain(args):
    from .trainer import ClipCache, PretrainConfig, pretrain_audio_classifier, save_audio_classifier
    pre = asdict(PretrainConfig())
    defaults = {"data": "", "out": "", "workers": 1, **pre, **_spectral_defaults()}
    v = _resolve(args, defaults, ("data", "out", "max_steps", "lr", "batch_size"))
    _require(v, "data", "--data")
    _require(v, "out", "--out")
    out = Path(v["out"])
    _start_run(out.parent, v, "pretrain-audio-id")
    params = _spectral_from(v)
    train = ClipCache(v["data"], "train", params, workers=v["workers"])
    val = ClipCache(v["data"], "val", params, workers=v["workers"])
    clf, index, report = pretrain_audio_classifier(train, val, PretrainConfig(**{k: v[k] for k in pre}))
    save_audio_classifier(out, clf, index, report)
    _write_json(out.with_suffix(".json"), report)
    log.info("audio-id validation accuracy %.4f", report["val_accuracy"],
             extra={"fields": {"val_accuracy": report["val_accuracy"], "warning": report["warning"]}})
    if report["warning"]:
        log.warning(report["warning"])


def cmd_train(args):
    from .trainer import ClipCache, TrainConfig, Trainer, load_audio_classifier, run_training
    defaults = {**TrainConfig().to_dict(), "audio_id": "", "resume": "", "workers": 1, **_spectral_defaults()}
    defaults["decay_steps"] = tuple(defaults["decay_steps"])
    v = _resolve(args, defaults, ("data", "out", "audio_id", "resume", "max_steps", "n_heads", "lr0",
                                  "batch_size"))
    _require(v, "data", "--data")
    _require(v, "audio_id", "--audio-id")
    _require(v, "out", "--out")
    _start_run(v["out"], v, "train")
    params = _spectral_from(v)
    data = ClipCache(v["data"], "train", params, workers=v["workers"])
    if v["resume"]:
        trainer = Trainer.resume(v["resume"], data)
        trainer.cfg.max_steps = v["max_steps"]
    else:
        cfg = TrainConfig.from_dict({f.name: v[f.name] for f in fields(TrainConfig)})
        clf, index = load_audio_classifier(v["audio_id"])
        trainer = Trainer(cfg, data, clf, index)

    def report(m):
        if m["step"] % max(1, trainer.cfg.max_steps // 20) == 0:
            log.info("step %d L_tot %.3f L_recon %.4f lr %.2e", m["step"], m["L_tot"], m["L_recon"], m["lr"],
                     extra={"fields": {k: m[k] for k in ("step", "L_tot", "L_recon", "lr")}})

    run_training(trainer, v["out"], on_step=report)
    log.info("finished at step %d", trainer.step)


def _load_model(path):
    from .trainer import load_generator, spectral_params
    model, index, meta = load_generator(path)
    return model, spectral_params(meta)


def cmd_synthesize(args):
    from .evaluation import save_mel_png, synthesize_mel
    from .synthesis import vocode
    from .tensorio import save_tensor
    from .toydata import load_sample
    defaults = {"ckpt": "", "input": "", "out_wav": "", "out_mel": "", "griffin_lim_iters": 60,
                "seed": 0, "workers": 1}
    v = _resolve(args, defaults, ("ckpt", "input", "out_wav", "out_mel"))
    for key in ("ckpt", "input", "out_wav"):
        _require(v, key, "--" + key.replace("_", "-"))
    _start_run(Path(v["out_wav"]).parent, v, "synthesize")
    model, params = _load_model(v["ckpt"])
    mel = synthesize_mel(model, load_sample(v["input"]).video)
    dsp.write_wav(v["out_wav"], vocode(model.postnet, mel, params, n_iters=v["griffin_lim_iters"]),
                  params.sample_rate)
    if v["out_mel"]:
        if v["out_mel"].endswith(".png"):
            save_mel_png(v["out_mel"], mel)
        else:
            save_tensor(v["out_mel"], mel.astype(np.float32))
    log.info("synthesized %s -> %s", v["input"], v["out_wav"])


def cmd_swap_style(args):
    from .evaluation import style_swap
    from .toydata import load_sample
    defaults = {"ckpt": "", "content": "", "style": "", "out_wav": "", "report": "", "griffin_lim_iters": 60,
                "seed": 0, "workers": 1}
    v = _resolve(args, defaults, ("ckpt", "content", "style", "out_wav", "report"))
    for key in ("ckpt", "content", "style", "out_wav"):
        _require(v, key, "--" + key.replace("_", "-"))
    _start_run(Path(v["out_wav"]).parent, v, "swap-style")
    model, params = _load_model(v["ckpt"])
    content, style = load_sample(v["content"]), load_sample(v["style"])
    result = style_swap(model, content.video, style.video, content.audio, style.audio, params,
                        n_iters=v["griffin_lim_iters"])
    dsp.write_wav(v["out_wav"], result.waveform, params.sample_rate)
    report = dict(result.report, content=v["content"], style=v["style"])
    if v["report"]:
        _write_json(v["report"], report)
    log.info("style swap F0 %s", report["f0_output"], extra={"fields": report})


def cmd_evaluate(args):
    from .evaluation import evaluate
    from .trainer import ClipCache
    defaults = {"ckpt": "", "data": "", "split": "test", "metrics": "stoi,estoi,eer", "pesq_csv": "",
                "report": "", "griffin_lim_iters": 60, "seed": 0, "workers": 1}
    v = _resolve(args, defaults, ("ckpt", "data", "split", "metrics", "pesq_csv", "report"))
    for key in ("ckpt", "data", "report"):
        _require(v, key, "--" + key)
    _start_run(Path(v["report"]).parent, v, "evaluate")
    model, params = _load_model(v["ckpt"])
    cache = ClipCache(v["data"], v["split"], params, workers=v["workers"])
    names = tuple(m.strip() for m in v["metrics"].split(",") if m.strip())
    report = evaluate(model, cache, names, pesq_csv=v["pesq_csv"] or None, n_iters=v["griffin_lim_iters"],
                      seed=v["seed"])
    report["split"] = v["split"]
    report["checkpoint"] = v["ckpt"]
    _write_json(v["report"], report)
    log.info("evaluation %s", json.dumps(report["metrics"]), extra={"fields": {"metrics": report["metrics"]}})


def cmd_export_features(args):
    from .evaluation import export_features
    from .trainer import ClipCache
    defaults = {"ckpt": "", "data": "", "split": "test", "out": "", "seed": 0, "workers": 1}
    v = _resolve(args, defaults, ("ckpt", "data", "split", "out"))
    for key in ("ckpt", "data", "out"):
        _require(v, key, "--" + key)
    _start_run(v["out"], v, "export-features")
    model, params = _load_model(v["ckpt"])
    cache = ClipCache(v["data"], v["split"], params, workers=v["workers"])
    info = export_features(model, cache.video, cache.entries, v["out"])
    log.info("exported %d rows of width %d", info["rows"], info["width"])


# --- parser ----------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed for every random stream")
    common.add_argument("--workers", type=int, default=None, help="parallel sample loaders")
    common.add_argument("--config", default=None, help="flat key = value config file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vst", description="Visage-conditioned video-to-speech toolkit.")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")

    s = sub.add_parser("make-toy-data", parents=[common], help="generate the synthetic audiovisual dataset")
    s.add_argument("--out")
    s.add_argument("--subjects", type=int)
    s.add_argument("--per-subject", type=int, dest="per_subject")
    s.add_argument("--split", choices=("independent", "dependent"))
    s.add_argument("--frames", type=int)
    s.add_argument("--size", type=int, help="frame height and width")
    s.set_defaults(func=cmd_make_toy_data)

    s = sub.add_parser("pretrain-audio-id", parents=[common], help="train the frozen audio-identity classifier")
    s.add_argument("--data")
    s.add_argument("--out", help="checkpoint path")
    s.add_argument("--max-steps", type=int, dest="max_steps")
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int, dest="batch_size")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", parents=[common], help="train the video-to-speech model")
    s.add_argument("--data")
    s.add_argument("--audio-id", dest="audio_id")
    s.add_argument("--out", help="run directory")
    s.add_argument("--resume", help="continue from a training checkpoint")
    s.add_argument("--max-steps", type=int, dest="max_steps")
    s.add_argument("--n-heads", type=int, dest="n_heads")
    s.add_argument("--lr0", type=float)
    s.add_argument("--batch-size", type=int, dest="batch_size")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", parents=[common], help="mel and waveform for one clip")
    s.add_argument("--ckpt")
    s.add_argument("--input", help="AVS1 sample file")
    s.add_argument("--out-wav", dest="out_wav")
    s.add_argument("--out-mel", dest="out_mel", help=".png for an image, anything else for an SPC1 tensor")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("swap-style", parents=[common], help="voice one clip's content with another's visage style")
    s.add_argument("--ckpt")
    s.add_argument("--content")
    s.add_argument("--style")
    s.add_argument("--out-wav", dest="out_wav")
    s.add_argument("--report")
    s.set_defaults(func=cmd_swap_style)

    s = sub.add_parser("evaluate", parents=[common], help="STOI/ESTOI/EER report over a split")
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--split")
    s.add_argument("--metrics", help="comma list from stoi,estoi,eer")
    s.add_argument("--pesq-csv", dest="pesq_csv", help="externally computed PESQ (sample_path,pesq)")
    s.add_argument("--report")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-features", parents=[common], help="dump time-averaged f_sc/f_id per clip")
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--split")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        print("vst: error: a subcommand is required", file=sys.stderr)
        return 2
    root = logging.getLogger("vst")
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    stderr = logging.StreamHandler(sys.stderr)
    stderr.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    root.addHandler(stderr)
    if deterministic_requested():
        set_deterministic(True)
    code = 0
    t0 = time.time()
    try:
        args.func(args)
        log.info("done in %.1fs", time.time() - t0, extra={"fields": {"event": "done", "exit_code": 0}})
    except NumericError as exc:
        code = 3
        log.error("numeric abort (%s): %s", exc.component, exc,
                  extra={"fields": {"event": "abort", "component": exc.component, "exit_code": 3}})
    except (ValidationError, PreconditionError, OSError) as exc:
        code = 2
        log.error("%s", exc, extra={"fields": {"event": "error", "exit_code": 2}})
    finally:
        for h in [stderr, *_run_handlers]:
            root.removeHandler(h)
            h.close()
        _run_handlers.clear()
    return code


if __name__ == "__main__":
    sys.exit(main())
