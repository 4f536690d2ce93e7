import logging

import pytest

from core.logging import LOG_FORMAT, RunContextFilter, init_logging, log_file_for, set_epoch, set_run_id


@pytest.fixture(autouse=True)
def _restore_logging():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    set_epoch(None)
    set_run_id("-")
    for h in list(root.handlers):
        if h not in handlers:
            root.removeHandler(h)
            h.close()
    for h in handlers:
        if h not in root.handlers:
            root.addHandler(h)
    root.setLevel(level)


def _format(msg: str) -> str:
    record = logging.LogRecord("yoloe", logging.INFO, __file__, 1, msg, None, None)
    RunContextFilter().filter(record)
    return logging.Formatter(LOG_FORMAT).format(record)


def test_filter_adds_epoch_only_while_set():
    set_run_id("train_abcd1234")
    assert "[train_abcd1234] yoloe: x" in _format("x")
    set_epoch(3)
    assert "[train_abcd1234 e3] yoloe: x" in _format("x")
    set_epoch(None)
    assert "[train_abcd1234] yoloe: x" in _format("x")


def test_init_logging_writes_per_command_file(tmp_path):
    path = init_logging("INFO", log_dir=tmp_path / "logs", command="eval")
    assert path == log_file_for("eval", tmp_path / "logs")
    set_run_id("eval_00000000")
    logging.getLogger("yoloe").info("[eval] hello")
    for h in logging.getLogger().handlers:
        h.flush()
    text = path.read_text(encoding="utf-8")
    assert "[eval_00000000] yoloe: [eval] hello" in text
    assert not (tmp_path / "logs" / "app.log").exists()


def test_init_logging_replaces_handlers(tmp_path):
    init_logging("DEBUG", log_dir=tmp_path, command="a")
    init_logging("WARNING", log_dir=tmp_path, command="b")
    root = logging.getLogger()
    assert root.level == logging.WARNING
    files = [h.baseFilename for h in root.handlers if isinstance(h, logging.FileHandler)]
    assert files == [str(tmp_path / "b.log")]
