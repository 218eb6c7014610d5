"""End-to-end CLI runs over small fixtures."""

import json

import pytest

from cladmop.cli import main
from cladmop.data_pipeline import save_trials

from test_data_pipeline import sct_fixture
from test_peft import separable_trials
from test_pretrain import synthetic_trials, tiny_tree


@pytest.fixture
def workdir(tmp_path):
    tree_path = tmp_path / "icd_tree.tsv"
    tiny_tree().save(tree_path)
    return tmp_path


def write_raw_corpus(tmp_path):
    trials, _, _ = sct_fixture()
    raw = tmp_path / "raw.jsonl"
    save_trials(raw, trials)
    syn = tmp_path / "synonyms.tsv"
    syn.write_text(
        "aspirin\tD001\nacetylsalicylic acid\tD001\nzelarix\tD002\n"
        "novumab\tD003\noldestat\tD004\ngaprenib\tD005\n",
        encoding="utf-8",
    )
    marketed = tmp_path / "marketed.txt"
    marketed.write_text("D004\n", encoding="utf-8")
    return raw, syn, marketed


def small_config(tmp_path, **extra):
    lines = {
        "arch.d_dm": "8", "arch.num_heads": "2", "arch.d_mol": "16",
        "arch.enrich_layers": "1", "arch.grouping_layers": "1",
        "arch.self_layers": "1", "arch.final_centroids": "4",
        "encoder.d_llm": "16", "pretrain.epochs": "3",
        "pretrain.batch_size": "16", "pretrain.learning_rate": "1e-3",
        "finetune.epochs": "2", "finetune.batch_size": "16",
    }
    lines.update({k: str(v) for k, v in extra.items()})
    path = tmp_path / "run.cfg"
    path.write_text(
        "# desk-scale run\n" + "".join(f"{k}={v}\n" for k, v in lines.items()),
        encoding="utf-8",
    )
    return path


class TestBuildDataset:
    def test_emits_labeled_file_and_report_deterministically(self, workdir, capsys):
        raw, syn, marketed = write_raw_corpus(workdir)
        out1, out2 = workdir / "o1", workdir / "o2"
        for out in (out1, out2):
            rc = main(["build-dataset", "--data", str(raw), "--synonyms", str(syn),
                       "--marketed", str(marketed), "--out", str(out)])
            assert rc == 0
        assert (out1 / "sct.jsonl").read_bytes() == (out2 / "sct.jsonl").read_bytes()
        assert (out1 / "exclusions.csv").read_bytes() == \
            (out2 / "exclusions.csv").read_bytes()
        printed = capsys.readouterr().out
        assert "Number of drugs" in printed

    def test_missing_synonym_file_is_usage_error(self, workdir):
        raw, _, marketed = write_raw_corpus(workdir)
        with pytest.raises(SystemExit) as ei:
            main(["build-dataset", "--data", str(raw), "--synonyms",
                  str(workdir / "nope.tsv"), "--marketed", str(marketed),
                  "--out", str(workdir / "o")])
        assert ei.value.code == 2


def run_pretrain(workdir, out, seed=7):
    sct = workdir / "sct.jsonl"
    save_trials(sct, synthetic_trials(12, seed=3, labeled=1))
    cfg = small_config(workdir)
    rc = main(["pretrain", "--data", str(sct), "--encoder", "toy",
               "--icd-tree", str(workdir / "icd_tree.tsv"), "--config", str(cfg),
               "--seed", str(seed), "--out", str(out)])
    assert rc == 0
    return out / "pretrain.ckpt"


class TestPretrainCommand:
    def test_deterministic_checkpoint(self, workdir):
        a = run_pretrain(workdir, workdir / "p1")
        b = run_pretrain(workdir, workdir / "p2")
        assert a.read_bytes() == b.read_bytes()
        curve = (workdir / "p1" / "pretrain_loss.csv").read_text("utf-8")
        assert curve.startswith("# config_hash=")
        assert "epoch,train_loss,val_loss,top1_acc" in curve

    def test_meta_sidecar(self, workdir):
        ckpt = run_pretrain(workdir, workdir / "p3")
        with open(str(ckpt) + ".meta.json", encoding="utf-8") as fh:
            meta = json.load(fh)
        assert meta["stage"] == "pretrain"
        assert meta["seed"] == 7
        assert meta["config"]["arch.d_dm"] == "8"


class TestFinetuneEval:
    def test_full_workflow(self, workdir):
        ckpt = run_pretrain(workdir, workdir / "pre")
        labeled = workdir / "labeled.jsonl"
        save_trials(labeled, separable_trials(16, seed=4))
        out = workdir / "ft"
        rc = main(["finetune", "--data", str(labeled), "--pretrained", str(ckpt),
                   "--lora-sites", "both", "--out", str(out), "--seed", "7"])
        assert rc == 0
        ft_ckpt = out / "finetune.ckpt"
        assert ft_ckpt.exists()
        metrics_csv = (out / "finetune_metrics.csv").read_text("utf-8")
        assert "epoch,train_loss,val_f1,val_prauc,val_rocauc" in metrics_csv

        test_file = workdir / "test.jsonl"
        save_trials(test_file, separable_trials(20, seed=9))
        ev = workdir / "ev"
        rc = main(["eval", "--data", str(test_file), "--model", str(ft_ckpt),
                   "--out", str(ev), "--seed", "7"])
        assert rc == 0
        report = json.loads((ev / "eval_full.json").read_text("utf-8"))
        assert report["n_draws"] == 10
        assert set(report["metrics"]) == {"accuracy", "f1", "pr_auc", "roc_auc"}

    def test_new_disease_subset_restriction(self, workdir):
        ckpt = run_pretrain(workdir, workdir / "pre2")
        train_like = separable_trials(12, seed=11)
        test_like = separable_trials(12, seed=11)
        for i, t in enumerate(test_like):
            t.nct_id = f"NCTX{i:04d}"
        # half the test trials carry an unseen code combination (a pair,
        # where every training trial names a single code)
        for t in test_like[6:]:
            t.icd_codes = ["A00", "C50"]
        labeled = workdir / "train.jsonl"
        save_trials(labeled, train_like)
        test_file = workdir / "test2.jsonl"
        save_trials(test_file, test_like)
        out = workdir / "ft2"
        rc = main(["finetune", "--data", str(labeled), "--pretrained", str(ckpt),
                   "--out", str(out), "--seed", "7"])
        assert rc == 0
        ev = workdir / "ev2"
        rc = main(["eval", "--data", str(test_file), "--model",
                   str(out / "finetune.ckpt"), "--subset", "new-disease",
                   "--train-data", str(labeled), "--out", str(ev), "--seed", "7"])
        assert rc == 0
        report = json.loads((ev / "eval_new_disease.json").read_text("utf-8"))
        assert report["subset"] == "new-disease"


class TestGradcheckCommand:
    def test_passes_and_exit_zero(self, workdir, capsys):
        rc = main(["gradcheck", "--seed", "3", "--max-coords", "120"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "fuse_forward+pool+loss" in out
        assert "gradient check passed" in out


class TestBenchCommand:
    def test_scaling_table(self, workdir, capsys):
        out = workdir / "bench"
        rc = main(["bench", "--crit-lens", "128,256,512", "--out", str(out),
                   "--seed", "1"])
        assert rc == 0
        rows = (out / "bench.csv").read_text("utf-8").splitlines()
        header = rows[1].split(",")
        data = [r.split(",") for r in rows[2:]]
        g_ratio = [float(r[2]) for r in data]
        f_ratio = [float(r[4]) for r in data]
        for got, want in zip(g_ratio, (1, 2, 4)):
            assert abs(got - want) <= 0.1 * want
        for got, want in zip(f_ratio, (1, 4, 16)):
            assert abs(got - want) <= 0.1 * want


class TestStoreEncoderWorkflow:
    def test_pretrain_with_fixture_store(self, workdir):
        from cladmop.criteria import LEVELS, ToyCriteriaEncoder, write_store

        trials = synthetic_trials(8, seed=2, labeled=1)
        sct = workdir / "sct.jsonl"
        save_trials(sct, trials)
        toy = ToyCriteriaEncoder(seed=2, d_llm=16)
        records = {
            t.nct_id: tuple(toy.encode(t).level(lv).data for lv in LEVELS)
            for t in trials
        }
        store_path = workdir / "fixture_store.bin"
        write_store(store_path, 16, records)
        cfg = small_config(workdir)
        out = workdir / "store_run"
        rc = main(["pretrain", "--data", str(sct), "--encoder", "store",
                   "--store", str(store_path), "--icd-tree",
                   str(workdir / "icd_tree.tsv"), "--config", str(cfg),
                   "--seed", "2", "--out", str(out)])
        assert rc == 0
        assert (out / "pretrain.ckpt").exists()


class TestBuildDatasetSplit:
    def test_cut_date_emits_temporal_split(self, workdir):
        raw, syn, marketed = write_raw_corpus(workdir)
        out = workdir / "split_out"
        rc = main(["build-dataset", "--data", str(raw), "--synonyms", str(syn),
                   "--marketed", str(marketed), "--cut-date", "2012-01-01",
                   "--out", str(out)])
        # fixture dates are all 2012-01-01, so the test side is empty
        assert rc == 1

    def test_cut_date_with_spread_dates(self, workdir):
        from cladmop.data_pipeline import load_trials
        from test_data_pipeline import rec

        trials = [rec(f"NCT{i:03d}", date=f"20{10 + i % 6}-03-01",
                      smiles=("aspirin",), phase=("I", "II")[i % 2])
                  for i in range(20)]
        trials.append(rec("NCT900", phase="III", smiles=("aspirin",),
                          date="2016-07-01"))
        raw = workdir / "raw2.jsonl"
        save_trials(raw, trials)
        syn = workdir / "syn2.tsv"
        syn.write_text("aspirin\tD001\n", encoding="utf-8")
        marketed = workdir / "mk2.txt"
        marketed.write_text("D001\n", encoding="utf-8")
        out = workdir / "split_out2"
        rc = main(["build-dataset", "--data", str(raw), "--synonyms", str(syn),
                   "--marketed", str(marketed), "--cut-date", "2013-06-01",
                   "--out", str(out), "--seed", "3"])
        assert rc == 0
        train = load_trials(out / "sct_train.jsonl")
        test = load_trials(out / "sct_test.jsonl")
        assert train and test
        assert all(t.start_date <= "2013-06-01" for t in train)
        assert all(t.start_date > "2013-06-01" for t in test)
