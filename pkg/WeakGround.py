import asyncio
import functools
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from sys import exit
from typing import Any, Iterator, Optional

import click
from pydantic import ValidationError

from helpers import MiscHelper, cache_dir
from grounding.bundle import discover_bundles, load_scene_bundle, write_scene_bundle
from grounding.encoders import FrozenVLM, build_vlm, write_embedding_cache
from grounding.evaluation import ReportFile, compare_reports, evaluate, render_table
from grounding.inference import ground_all, read_predictions
from grounding.model import load_checkpoint
from grounding.projection import (
    compute_scene_regions,
    regions_cache_path,
    regions_key,
    write_regions,
)
from grounding.schemas import ExtensionMode, Modality, Record, RunConfig, Supervision
from grounding.scene import CategoryVocabulary, Scene
from grounding.synthetic import generate_synthetic_dataset
from grounding.training import (
    CATEGORY_CACHE_FILE,
    F2D_CACHE_FILE,
    encode_scene_regions,
    train as train_model,
)
from grounding.utils._logger import registry_logger, weakground_logger
from grounding.utils.utils import CheckpointError, SceneValidationError, write_json
from sql import crud, schemas
from sql.database import create_engine, create_session_factory, init_db

STAMP_FILE = "stamp.json"

misc_helper = MiscHelper()


def _merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _field_errors(error: ValidationError) -> str:
    return "\n".join(
        f"  {'.'.join(str(part) for part in item['loc']) or '<root>'}: {item['msg']}"
        for item in error.errors()
    )


def load_run_config(
    command: str, config_path: Optional[Path], overrides: dict[str, Any]
) -> RunConfig:
    """
    Builds the run configuration from an optional JSON file with the command-line flags on top.

    Flags that were not given are `None` and leave the file's value alone. The run seed is copied
    into the encoder and training seeds.

    Args:
        command (str): The command being run.
        config_path (Path, optional): A JSON document shaped like RunConfig.
        overrides (dict): Nested flag values.

    Returns:
        RunConfig: The validated configuration.

    Raises:
        click.UsageError: With one line per invalid field; click exits with status 2.
    """
    try:
        base = RunConfig()
        if config_path is not None:
            base = RunConfig.model_validate_json(Path(config_path).read_text(encoding="utf-8"))
        merged = _merge(base.model_dump(mode="json"), overrides)
        merged["command"] = command
        config = RunConfig.model_validate(merged)
    except ValidationError as e:
        raise click.UsageError(f"Invalid configuration:\n{_field_errors(e)}")
    return config.with_seed(config.seed)


def run_stamp(config: RunConfig) -> Record.Stamp:
    return Record.Stamp(
        config_hash=misc_helper.config_hash(config.hyperparameters()),
        seed=config.seed,
        code_version=misc_helper.code_version(),
    )


def _require_path(path: Optional[Path], flag: str, must_exist: bool = True) -> Path:
    if path is None:
        raise click.UsageError(f"Missing {flag} (give the flag or set it in the config file).")
    if must_exist and not Path(path).exists():
        raise click.UsageError(f"{flag} does not exist: {path}")
    return Path(path)


async def _start_run(config: RunConfig, artifact: Optional[Path]) -> int:
    engine = create_engine()
    try:
        await init_db(engine)
        return await crud.add_run(
            create_session_factory(engine),
            schemas.Run.Add(
                command=config.command,
                started_at=datetime.now(timezone.utc),
                artifact_path=None if artifact is None else str(artifact),
                **run_stamp(config).model_dump(),
            ),
        )
    finally:
        await engine.dispose()


async def _finish_run(run_id: int, status: str) -> None:
    engine = create_engine()
    try:
        await crud.finish_run(
            create_session_factory(engine),
            schemas.Run.Finish(
                run_id=run_id, status=status, finished_at=datetime.now(timezone.utc)
            ),
        )
    finally:
        await engine.dispose()


@contextmanager
def recorded_run(config: RunConfig, artifact: Optional[Path] = None) -> Iterator[None]:
    """
    Records the run in the registry. Registry failures are logged and never fail the command.
    """
    run_id = None
    try:
        run_id = asyncio.run(_start_run(config, artifact))
    except Exception as e:
        registry_logger.warning(f"Could not record the {config.command} run: {e}", exc_info=e)

    status = "failed"
    try:
        yield
        status = "ok"
    finally:
        if run_id is not None:
            try:
                asyncio.run(_finish_run(run_id, status))
            except Exception as e:
                registry_logger.warning(f"Could not finish run {run_id}: {e}", exc_info=e)


def handle_errors(func):
    """
    Turns domain failures into exit status 1; usage errors keep click's status 2.
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as e:
            weakground_logger.error(f"{func.__name__} failed: {e}", exc_info=e)
            click.echo(f"Error: {e}", err=True)
            exit(1)

    return wrapper


def _load_scenes(scenes_dir: Path, mode: str) -> list[Scene]:
    bundles = discover_bundles(scenes_dir)
    if not bundles:
        raise SceneValidationError(f"No scene bundles found in {scenes_dir}")
    return [load_scene_bundle(bundle, mode) for bundle in bundles]


config_option = click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="JSON configuration file; flags override its values.",
)
seed_option = click.option("--seed", type=int, default=None, help="Run seed.")


@click.group()
def cli():
    """
    Weakly-supervised 3D visual grounding: preprocess, train, infer, eval and synth.
    """


@cli.command()
@config_option
@seed_option
@click.option("--scenes-out", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--count", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--proposals", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--categories", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--frames", type=click.IntRange(min=1), default=3, show_default=True)
@handle_errors
def synth(config_path, seed, scenes_out, count, proposals, categories, frames):
    """
    Generates synthetic scene bundles.
    """
    config = load_run_config("synth", config_path, {"seed": seed, "paths": {"out": scenes_out}})
    out = _require_path(config.paths.out, "--scenes-out", must_exist=False)
    with recorded_run(config, out):
        scenes = generate_synthetic_dataset(config.seed, count, proposals, categories, frames)
        for scene in scenes:
            write_scene_bundle(scene, out / scene.scene_id)
        write_json(out / STAMP_FILE, run_stamp(config).model_dump(mode="json"))
        weakground_logger.info(f"Wrote {len(scenes)} synthetic scenes to {out}")
        click.echo(f"Wrote {len(scenes)} scene bundles to {out}")


class _ProviderPool:
    """
    One frozen provider per category vocabulary, shared by the preprocess workers.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self._providers: dict[tuple[str, ...], FrozenVLM] = {}
        self._lock = threading.Lock()

    def get(self, vocabulary: CategoryVocabulary) -> FrozenVLM:
        with self._lock:
            if vocabulary.labels not in self._providers:
                self._providers[vocabulary.labels] = build_vlm(self.config.encoder, vocabulary)
            return self._providers[vocabulary.labels]


def preprocess_scene(
    bundle: Path,
    config: RunConfig,
    stamp: Record.Stamp,
    cache: Path,
    providers: Optional[_ProviderPool] = None,
) -> Path:
    """
    Writes the regions cache of one bundle and, with a provider pool, its F2D and category caches.

    Regions whose crop cannot be encoded are dropped from both files so their rows stay aligned.

    Returns:
        Path: The regions cache file.
    """
    scene = load_scene_bundle(bundle, "inference")
    mode = config.train.extension_mode
    depth_visibility = config.train.use_depth_visibility
    path = regions_cache_path(cache, scene.scene_id, mode)

    if providers is None:
        regions = compute_scene_regions(scene, mode, depth_visibility)
        key = regions_key(scene, mode, depth_visibility)
    else:
        vlm = providers.get(scene.categories)
        regions, image_embeddings = encode_scene_regions(scene, vlm, config.train)
        write_embedding_cache(path.parent / F2D_CACHE_FILE, image_embeddings)
        write_embedding_cache(
            path.parent / CATEGORY_CACHE_FILE,
            vlm.encode_text(scene.categories.labels, Modality.TEXT_CATEGORY),
        )
        key = regions_key(scene, mode, depth_visibility, vlm.identity)

    write_regions(path, scene.scene_id, key, regions, stamp)
    return path


@cli.command()
@config_option
@seed_option
@click.option("--scenes", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option(
    "--extension-mode",
    type=click.Choice([mode.value for mode in ExtensionMode]),
    default=None,
    help="Projection variant; defaults to boundary_extended.",
)
@click.option("--depth-visibility/--no-depth-visibility", default=None)
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
@click.option(
    "--cache-embeddings", is_flag=True, help="Also cache the frozen region and category embeddings."
)
@click.option("--backend", type=click.Choice(["toy", "vlm"]), default=None)
@handle_errors
def preprocess(
    config_path, seed, scenes, extension_mode, depth_visibility, workers, cache_embeddings, backend
):
    """
    Projects every proposal into its best frame and caches the regions per scene.
    """
    config = load_run_config(
        "preprocess",
        config_path,
        {
            "seed": seed,
            "paths": {"scenes": scenes},
            "encoder": {"backend": backend},
            "train": {"extension_mode": extension_mode, "use_depth_visibility": depth_visibility},
        },
    )
    scenes_dir = _require_path(config.paths.scenes, "--scenes")
    cache = cache_dir()
    stamp = run_stamp(config)
    providers = _ProviderPool(config) if cache_embeddings else None

    with recorded_run(config, cache / "scenes"):
        bundles = discover_bundles(scenes_dir)
        if not bundles:
            raise SceneValidationError(f"No scene bundles found in {scenes_dir}")

        def work(bundle: Path) -> Optional[Path]:
            try:
                return preprocess_scene(bundle, config, stamp, cache, providers)
            except Exception as e:
                weakground_logger.error(f"Could not preprocess {bundle}: {e}", exc_info=e)
                return None

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, bundles))

        failed = [bundle.name for bundle, result in zip(bundles, results) if result is None]
        click.echo(f"Preprocessed {len(bundles) - len(failed)}/{len(bundles)} scenes into {cache}")
        if failed:
            click.echo(f"Failed scenes: {', '.join(failed)}", err=True)
            exit(1)


@cli.command()
@config_option
@seed_option
@click.option("--scenes", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--epochs", type=click.IntRange(min=1), default=None)
@click.option("--backend", type=click.Choice(["toy", "vlm"]), default=None)
@click.option(
    "--extension-mode", type=click.Choice([mode.value for mode in ExtensionMode]), default=None
)
@click.option(
    "--supervision",
    type=click.Choice([mode.value for mode in Supervision]),
    default=None,
    help="What the 3D branch learns from; defaults to weak.",
)
@click.option("--progress/--no-progress", default=None)
@handle_errors
def train(config_path, seed, scenes, out, epochs, backend, extension_mode, supervision, progress):
    """
    Trains the grounding model on weakly labelled scene bundles.
    """
    config = load_run_config(
        "train",
        config_path,
        {
            "seed": seed,
            "paths": {"scenes": scenes, "out": out},
            "encoder": {"backend": backend},
            "train": {
                "max_epochs": epochs,
                "extension_mode": extension_mode,
                "supervision": supervision,
                "progress": progress,
            },
        },
    )
    scenes_dir = _require_path(config.paths.scenes, "--scenes")
    out_dir = _require_path(config.paths.out, "--out", must_exist=False)

    with recorded_run(config, out_dir):
        # Ground truth training needs no frames
        ground_truth = config.train.supervision is Supervision.GROUND_TRUTH
        loaded = _load_scenes(scenes_dir, "inference" if ground_truth else "training")
        vlm = build_vlm(config.encoder, loaded[0].categories)
        outcome = train_model(loaded, config, vlm, out_dir, cache_dir())
        click.echo(f"Final checkpoint: {outcome.checkpoint}")


@cli.command()
@config_option
@seed_option
@click.option("--checkpoint", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--scenes", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--topk", type=click.IntRange(min=1), default=None, help="Query categories kept.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--strategy", type=click.Choice(["ranked", "random"]), default=None)
@click.option("--progress", is_flag=True)
@handle_errors
def infer(config_path, seed, checkpoint, scenes, topk, out, strategy, progress):
    """
    Grounds every query of the scene bundles and writes a prediction file.
    """
    config = load_run_config(
        "infer",
        config_path,
        {
            "seed": seed,
            "k": topk,
            "strategy": strategy,
            "paths": {"checkpoint": checkpoint, "scenes": scenes, "predictions": out},
        },
    )
    checkpoint_path = _require_path(config.paths.checkpoint, "--checkpoint")
    scenes_dir = _require_path(config.paths.scenes, "--scenes")
    out_path = _require_path(config.paths.predictions, "--out", must_exist=False)

    with recorded_run(config, out_path):
        model, meta = load_checkpoint(checkpoint_path)
        loaded = _load_scenes(scenes_dir, "inference")
        for scene in loaded:
            if scene.categories != model.categories:
                raise CheckpointError(
                    f"Scene {scene.scene_id} uses another category vocabulary than {checkpoint_path}"
                )
        vlm = build_vlm(model.encoder_config, model.categories)
        document = ground_all(
            loaded,
            model,
            vlm,
            run_stamp(config),
            k=config.k,
            normalize=meta.normalize,
            strategy=config.strategy,
            out_path=out_path,
            progress=progress,
        )
        click.echo(
            f"Wrote {len(document.predictions)} predictions ({len(document.failures)} failures) to {out_path}"
        )


def _split_list(value: Optional[str], cast=str) -> Optional[list]:
    if value is None:
        return None
    try:
        return [cast(item.strip()) for item in value.split(",") if item.strip()]
    except ValueError as e:
        raise click.BadParameter(str(e))


@cli.command(name="eval")
@config_option
@seed_option
@click.option(
    "--predictions",
    "prediction_paths",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    multiple=True,
    help="Prediction file; repeat to compare runs.",
)
@click.option("--label", "labels", multiple=True, help="Row label per --predictions.")
@click.option("--scenes", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--metrics", default=None, help="Comma-separated: acc_iou,selection,recall.")
@click.option("--ious", default=None, help="Comma-separated IoU thresholds.")
@click.option("--n", "recall_n", type=click.IntRange(min=1), default=None)
@click.option("--report", type=click.Path(dir_okay=False, path_type=Path), default=None)
@handle_errors
def evaluate_command(
    config_path, seed, prediction_paths, labels, scenes, metrics, ious, recall_n, report
):
    """
    Scores prediction files and writes a report with an aligned comparison table.
    """
    prediction_paths = list(prediction_paths)
    config = load_run_config(
        "eval",
        config_path,
        {
            "seed": seed,
            "paths": {
                "scenes": scenes,
                "report": report,
                "predictions": prediction_paths[0] if prediction_paths else None,
            },
            "metrics": {
                "metrics": _split_list(metrics),
                "ious": _split_list(ious, float),
                "n": recall_n,
            },
        },
    )
    if not prediction_paths:
        prediction_paths = [_require_path(config.paths.predictions, "--predictions")]
    if labels and len(labels) != len(prediction_paths):
        raise click.UsageError("Give one --label per --predictions, or none.")
    labels = list(labels) or [path.stem for path in prediction_paths]
    scenes_dir = _require_path(config.paths.scenes, "--scenes")
    report_path = _require_path(config.paths.report, "--report", must_exist=False)

    with recorded_run(config, report_path):
        loaded = _load_scenes(scenes_dir, "inference")
        reports = {
            label: evaluate(read_predictions(path), loaded, config.metrics)
            for label, path in zip(labels, prediction_paths)
        }
        table = render_table(compare_reports(list(reports.items())))
        document = ReportFile(stamp=run_stamp(config), reports=reports, table=table)
        write_json(report_path, document.model_dump(mode="json"))
        click.echo(table)


@cli.command()
@click.option("--command", "command_name", default=None, help="Only runs of this command.")
@click.option("--n", "count", type=click.IntRange(min=1), default=20, show_default=True)
def runs(command_name, count):
    """
    Lists the most recent recorded runs.
    """

    async def fetch():
        engine = create_engine()
        try:
            await init_db(engine)
            return await crud.list_runs(
                create_session_factory(engine), schemas.Run.List(command=command_name, n=count)
            )
        finally:
            await engine.dispose()

    for run in asyncio.run(fetch()):
        click.echo(
            f"{run.id:>5}  {run.command:<10} {run.status:<8} {run.config_hash} seed={run.seed} "
            f"{run.code_version} {run.started_at:%Y-%m-%d %H:%M:%S} {run.artifact_path or ''}"
        )


if __name__ == "__main__":
    cli()
