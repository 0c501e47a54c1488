"""Tests for structured logging, run context and operation timing."""

import json
import logging

import pytest

from ssmvdm.logging import (
    bind_run_context,
    clear_run_context,
    generate_run_id,
    get_logger,
    log_operation,
    setup_logging,
)


@pytest.fixture
def log_file(tmp_path):
    path = tmp_path / "logs" / "run.jsonl"
    setup_logging("DEBUG", log_file=str(path))
    yield path
    clear_run_context()
    root = logging.getLogger()
    for handler in root.handlers[:]:
        handler.close()
        root.removeHandler(handler)


def _records(path):
    for handler in logging.getLogger().handlers:
        handler.flush()
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


class TestSetup:
    def test_json_lines_with_required_fields(self, log_file):
        get_logger("ssmvdm.test").info("dataset_written", videos=3)
        (record,) = _records(log_file)
        assert record["event"] == "dataset_written"
        assert record["level"] == "info"
        assert record["logger"] == "ssmvdm.test"
        assert record["videos"] == 3
        assert "timestamp" in record

    def test_level_filters(self, tmp_path):
        path = tmp_path / "warn.jsonl"
        setup_logging("WARNING", log_file=str(path))
        try:
            logger = get_logger("ssmvdm.test")
            logger.info("quiet")
            logger.warning("loud")
            assert [r["event"] for r in _records(path)] == ["loud"]
        finally:
            for handler in logging.getLogger().handlers[:]:
                handler.close()
                logging.getLogger().removeHandler(handler)

    def test_console_format(self, capsys):
        setup_logging("INFO", json_format=False)
        get_logger("ssmvdm.test").info("plain_event", step=2)
        err = capsys.readouterr().err
        assert "plain_event" in err
        assert "step=2" in err


class TestRunContext:
    def test_context_fields_attached_and_cleared(self, log_file):
        logger = get_logger("ssmvdm.test")
        run_id = bind_run_context("train", seed=7, run_id="abc123")
        logger.info("inside")
        clear_run_context()
        logger.info("outside")

        inside, outside = _records(log_file)
        assert run_id == "abc123"
        assert (inside["run_id"], inside["command"], inside["seed"]) == ("abc123", "train", 7)
        assert "run_id" not in outside

    def test_generated_ids_are_unique(self):
        ids = {generate_run_id() for _ in range(50)}
        assert len(ids) == 50
        assert all(len(i) == 12 for i in ids)


class TestLogOperation:
    def test_success_records_duration(self, log_file):
        logger = get_logger("ssmvdm.test")
        with log_operation(logger, "sample", count=2) as metrics:
            pass
        assert metrics.success
        assert metrics.duration_ms is not None and metrics.duration_ms >= 0

        completed = _records(log_file)[-1]
        assert completed["event"] == "operation_completed"
        assert completed["operation"] == "sample"
        assert completed["success"] is True
        assert completed["count"] == 2

    def test_failure_is_logged_and_reraised(self, log_file):
        logger = get_logger("ssmvdm.test")
        with pytest.raises(ValueError, match="bad step"):
            with log_operation(logger, "train") as metrics:
                raise ValueError("bad step")
        assert not metrics.success
        assert metrics.error == "bad step"

        completed = _records(log_file)[-1]
        assert completed["success"] is False
        assert completed["error"] == "bad step"
