"""Tests for filesystem utilities."""

from app.utils.filesystem import atomic_write_text, ensure_output_dir, safe_unlink, temp_workspace


def test_temp_workspace_creates_directory():
    with temp_workspace() as temp_dir:
        assert temp_dir.exists()
        assert temp_dir.is_dir()
        assert temp_dir.name.startswith("snmm_")


def test_temp_workspace_cleans_up():
    temp_path = None
    with temp_workspace("cleanup_test_") as temp_dir:
        temp_path = temp_dir
        (temp_dir / "psi.csv").write_text("label,estimate\n")

    assert temp_path is not None
    assert not temp_path.exists()


def test_temp_workspace_multiple_instances():
    with temp_workspace("first_") as dir1:
        with temp_workspace("second_") as dir2:
            assert dir1 != dir2
            assert dir1.exists()
            assert dir2.exists()


def test_temp_workspace_exception_handling():
    temp_path = None
    try:
        with temp_workspace("exception_test_") as temp_dir:
            temp_path = temp_dir
            (temp_dir / "file.txt").write_text("test")
            raise ValueError("Test exception")
    except ValueError:
        pass

    assert temp_path is not None
    assert not temp_path.exists()


def test_ensure_output_dir_creates_parents():
    with temp_workspace() as root:
        out = ensure_output_dir(root / "runs" / "network_line")
        assert out.is_dir()
        # idempotent
        assert ensure_output_dir(out) == out


def test_atomic_write_text_replaces_content():
    with temp_workspace() as root:
        target = root / "report.json"
        atomic_write_text(target, "{}\n")
        atomic_write_text(target, '{"seed": 1}\n')
        assert target.read_text(encoding="utf-8") == '{"seed": 1}\n'
        # no temp files left behind
        assert [p.name for p in root.iterdir()] == ["report.json"]


def test_safe_unlink_missing_file():
    with temp_workspace() as root:
        safe_unlink(root / "absent.txt")
        present = root / "present.txt"
        present.write_text("x")
        safe_unlink(present)
        assert not present.exists()
