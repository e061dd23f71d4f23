"""Command-line interface for embedding extraction and manifest conversion."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .convert import DATASETS, SchemaDriftError, convert_manifest, write_manifest
from .encoders import BACKBONES, BackboneUnavailable, make_encoder
from .extract import ExtractionJob, ListingError, extract_embeddings
from .storewriter import StoreWriteError

EXIT_CONFIG = 2
EXIT_VALIDATION = 3

_BACKBONE = click.Choice(sorted(BACKBONES))


@click.group()
def main():
    """Produce engine inputs: embedding stores and canonical manifests."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")


def _run_job(job: ExtractionJob, encoder_spec: str) -> None:
    try:
        encoder = make_encoder(encoder_spec, job.backbone)
        result = extract_embeddings(job, encoder)
    except BackboneUnavailable as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (ListingError, StoreWriteError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    click.echo(f"wrote {result.count} x {result.dim} vectors to {job.out}")
    if result.skipped:
        click.echo(f"skipped {len(result.skipped)} unreadable entries", err=True)


@main.command("embed-images")
@click.option("--backbone", type=_BACKBONE, required=True)
@click.option(
    "--listing",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    help="Text file naming one image per line (or id<TAB>path).",
)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--encoder", "encoder_spec", default="open_clip", show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
def embed_images(backbone, listing, out, encoder_spec, batch_size):
    """Embed images in listing order into a binary store."""
    try:
        job = ExtractionJob(
            backbone=backbone,
            listing=listing,
            out=out,
            kind="images",
            batch_size=batch_size,
        )
    except ListingError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    _run_job(job, encoder_spec)


@main.command("embed-texts")
@click.option("--backbone", type=_BACKBONE, required=True)
@click.option(
    "--captions",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    help='JSON-lines {"id", "text"} rows or id<TAB>text rows.',
)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--encoder", "encoder_spec", default="open_clip", show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
def embed_texts(backbone, captions, out, encoder_spec, batch_size):
    """Embed caption texts in file order into a binary store."""
    try:
        job = ExtractionJob(
            backbone=backbone,
            listing=captions,
            out=out,
            kind="texts",
            batch_size=batch_size,
        )
    except ListingError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    _run_job(job, encoder_spec)


@main.command("convert")
@click.option("--dataset", type=click.Choice(DATASETS), required=True)
@click.option(
    "--annotations",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    help="The dataset's native annotation JSON file.",
)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option(
    "--split",
    default="test",
    show_default=True,
    help="Annotation split to convert (karpathy-tir only).",
)
def convert(dataset, annotations, out, split):
    """Convert native annotations into a canonical manifest."""
    kwargs = {"split": split} if dataset == "karpathy-tir" else {}
    try:
        records = convert_manifest(dataset, annotations, **kwargs)
    except SchemaDriftError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    count = write_manifest(records, out)
    click.echo(f"wrote {count} records to {out}")


if __name__ == "__main__":
    main()
