"""Turns a directory of audio clips plus a prompt table into EMB1 embedding
files and a JSONL manifest for the scoring package to consume."""

from .job import ExtractionJob, JobError, load_job, read_prompt_table
from .run import ExtractionError, extract

__all__ = [
    "ExtractionJob",
    "JobError",
    "ExtractionError",
    "load_job",
    "read_prompt_table",
    "extract",
]
