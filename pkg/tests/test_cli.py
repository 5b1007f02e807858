import json

import pytest

from vlmforge.cli import main
from vlmforge.fixtures import FixtureSpec, fixture_gen
from vlmforge.trainer import RunLog


@pytest.fixture()
def corpora(tmp_path):
    spec = FixtureSpec(n_docs=12, images_per_doc=2, tokens_per_image=16,
                       n_pairs=40, pair_caption_lengths=(10, 11), seed=1)
    return fixture_gen(spec, tmp_path / "fix")


class TestParsing:
    def test_help_lists_subcommands(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for name in ("corpus", "pack", "train", "diag", "eval", "fixture"):
            assert name in out

    def test_no_args_prints_help(self, capsys):
        assert main([]) == 0
        assert "usage" in capsys.readouterr().out

    def test_unknown_subcommand_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_missing_required_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["fixture"])  # --out-dir required
        assert exc.value.code == 1


class TestCorpusCommands:
    def test_stats(self, corpora, capsys):
        assert main(["corpus", "stats", str(corpora["interleaved"])]) == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["num_docs"] == 12
        assert stats["images_per_sample"] == pytest.approx(2.0)

    def test_strict_malformed_line_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"doc_id": "ok", "segments": [{"text": "x"}]}\n{broken\n')
        rc = main(["corpus", "stats", str(bad), "--strict"])
        assert rc == 2
        assert "line 2" in capsys.readouterr().err

    def test_missing_file_exits_2(self, tmp_path):
        assert main(["corpus", "stats", str(tmp_path / "nope.jsonl")]) == 2

    def test_to_pairs_and_topk(self, corpora, tmp_path, capsys):
        pairs_out = tmp_path / "pairs.jsonl"
        rc = main(["corpus", "to-pairs", str(corpora["interleaved"]), str(pairs_out)])
        assert rc == 0
        assert len(pairs_out.read_text().splitlines()) == 24  # 12 docs x 2 images

        top_out = tmp_path / "top.jsonl"
        assert main(["corpus", "topk", str(pairs_out), str(top_out), "-k", "10"]) == 0
        assert len(top_out.read_text().splitlines()) == 10
        assert (tmp_path / "top.jsonl.manifest.json").exists()

    def test_reformat(self, corpora, tmp_path):
        out = tmp_path / "reformatted.jsonl"
        assert main(["corpus", "reformat", str(corpora["interleaved"]), str(out)]) == 0
        first = json.loads(out.read_text().splitlines()[0])
        kinds = ["image" if "image_id" in s else "text" for s in first["segments"]]
        assert kinds == sorted(kinds, key=lambda k: k != "image")

    def test_fixture_gen_both_spellings(self, tmp_path):
        for argv in (["fixture"], ["corpus", "fixture"]):
            out_dir = tmp_path / "-".join(argv)
            rc = main(argv + ["--out-dir", str(out_dir), "--n-docs", "4",
                              "--n-pairs", "4", "--tokens-per-image", "16"])
            assert rc == 0
            assert (out_dir / "interleaved.jsonl").exists()
            assert (out_dir / "pairs.jsonl").exists()


class TestPipeline:
    def test_pack_diag_eval_roundtrip(self, corpora, tmp_path, capsys):
        shard = tmp_path / "docs.shard"
        rc = main(["pack", "run", str(corpora["interleaved"]), str(shard),
                   "--max-len", "96", "--res", "16", "--patch", "8"])
        assert rc == 0
        assert shard.exists()
        assert (tmp_path / "docs.shard.manifest.json").exists()

        run_dir = tmp_path / "run"
        rc = main(["train", "run", "--preset", "a",
                   "--corpus-a", str(corpora["interleaved"]),
                   "--corpus-b", str(corpora["pairs"]),
                   "--out", str(run_dir), "--steps", "2,3,2",
                   "--batch-size", "4", "--seed", "3"])
        assert rc == 0
        for name in ("init-projector.ckpt", "pretrain.ckpt", "sft.ckpt",
                     "final.ckpt", "runlog.csv", "align.csv", "eval.csv",
                     "runlog.csv.manifest.json"):
            assert (run_dir / name).exists(), name
        assert len(RunLog.from_csv((run_dir / "runlog.csv").read_text()).records) == 7

        align_out = tmp_path / "align.csv"
        rc = main(["diag", "align", "--ckpt", str(run_dir / "final.ckpt"),
                   "--shard", str(shard), "--out", str(align_out)])
        assert rc == 0
        lines = align_out.read_text().strip().splitlines()
        assert lines[0] == "layer,chamfer_cos,n"
        assert len(lines) == 4  # embedding + 2 decoder layers, plus header

        task_path = tmp_path / "task.jsonl"
        pairs = [json.loads(l) for l in corpora["pairs"].read_text().splitlines()[:4]]
        with open(task_path, "w") as fh:
            fh.write(json.dumps({"name": "t", "metric": "candidate-rank"}) + "\n")
            for i, p in enumerate(pairs):
                fh.write(json.dumps({
                    "item_id": f"i{i}", "prompt": "cap: ", "answer": p["caption"],
                    "image_id": p["image_id"],
                    "candidates": [p["caption"], pairs[(i + 1) % 4]["caption"]],
                }) + "\n")
        eval_out = tmp_path / "eval.csv"
        rc = main(["eval", "run", "--ckpt", str(run_dir / "final.ckpt"),
                   "--task", str(task_path), "--out", str(eval_out)])
        assert rc == 0
        assert "accuracy" in capsys.readouterr().out
        assert eval_out.read_text().startswith("item_id,prediction,correct")

    def test_train_rerun_reproduces_runlog(self, corpora, tmp_path):
        logs = []
        for name in ("r1", "r2"):
            rc = main(["train", "run", "--preset", "d",
                       "--corpus-a", str(corpora["interleaved"]),
                       "--corpus-b", str(corpora["pairs"]),
                       "--out", str(tmp_path / name), "--steps", "2,2,2",
                       "--batch-size", "4", "--seed", "11"])
            assert rc == 0
            logs.append((tmp_path / name / "runlog.csv").read_bytes())
        assert logs[0] == logs[1]

    def test_compare_loss(self, corpora, tmp_path, capsys):
        for name, seed in (("a", 1), ("b", 2)):
            main(["train", "run", "--preset", "d",
                  "--corpus-a", str(corpora["interleaved"]),
                  "--corpus-b", str(corpora["pairs"]),
                  "--out", str(tmp_path / name), "--steps", "2,2,2",
                  "--batch-size", "4", "--seed", str(seed)])
        capsys.readouterr()
        rc = main(["train", "compare-loss",
                   str(tmp_path / "a" / "runlog.csv"),
                   str(tmp_path / "b" / "runlog.csv"),
                   "--final-window", "3"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert report["aligned_steps"] == 6

    def test_train_without_corpus_exits_2(self, tmp_path):
        rc = main(["train", "run", "--preset", "a", "--out", str(tmp_path / "x")])
        assert rc == 2

    def test_seed_env_default(self, corpora, tmp_path, monkeypatch):
        import importlib
        import vlmforge.cli as cli

        monkeypatch.setenv("VLMFORGE_SEED", "42")
        out = tmp_path / "p.jsonl"
        rc = cli.main(["corpus", "to-pairs", str(corpora["interleaved"]), str(out)])
        assert rc == 0
        mani = json.loads((tmp_path / "p.jsonl.manifest.json").read_text())
        assert mani["seed"] == 42
