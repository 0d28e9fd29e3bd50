import pytest
import torch

from cldet.continual import (
    ImageCache,
    MethodConfig,
    TrainConfig,
    build_schedule,
    evaluate,
    method_from_name,
    parse_scenario,
    run_scenario,
    sensitivity_delta_percent,
    train_task,
)
from cldet.data import SceneSpec, dataset_items, filter_annotations_for_task, generate_dataset
from cldet.detector import GridSpec, ToyDetector
from cldet.distill import TeacherSnapshot
from cldet.taskloss import ClassMask


class TestBuildSchedule:
    def test_15p1_on_20_classes(self):
        s = build_schedule(20, 15, 1)
        assert len(s.tasks) == 6
        assert s.tasks[0] == tuple(range(15))
        assert [len(t) for t in s.tasks[1:]] == [1] * 5
        assert s.tasks[1:] == ((15,), (16,), (17,), (18,), (19,))

    def test_10p10_on_20_classes(self):
        s = build_schedule(20, 10, 10)
        assert len(s.tasks) == 2
        assert all(len(t) == 10 for t in s.tasks)

    def test_40p10_on_80_classes(self):
        s = build_schedule(80, 40, 10)
        assert len(s.tasks) == 5

    def test_leftover_classes_reported(self):
        s = build_schedule(10, 4, 4)
        assert len(s.tasks) == 2
        assert s.leftover == (8, 9)

    def test_n_larger_than_classes_rejected(self):
        with pytest.raises(ValueError):
            build_schedule(10, 11, 1)

    def test_custom_order(self):
        s = build_schedule(4, 2, 2, class_order=[3, 1, 0, 2])
        assert s.tasks == ((3, 1), (0, 2))

    def test_seen_before(self):
        s = build_schedule(8, 4, 2)
        assert s.seen_before(0) == set()
        assert s.seen_before(2) == {0, 1, 2, 3, 4, 5}

    def test_parse_scenario(self):
        assert parse_scenario("15p1") == (15, 1)
        with pytest.raises(ValueError):
            parse_scenario("nope")


class TestSensitivity:
    def test_reference_percentages(self):
        assert sensitivity_delta_percent(56.1, 52.5) == pytest.approx(6.4, abs=0.05)
        assert sensitivity_delta_percent(60.7, 60.4) == pytest.approx(0.5, abs=0.05)

    def test_equal_inputs_zero(self):
        assert sensitivity_delta_percent(40.0, 40.0) == 0.0

    def test_zero_reference_flagged(self):
        with pytest.raises(ZeroDivisionError):
            sensitivity_delta_percent(0.0, 1.0)


class TestMethodFromName:
    def test_all_names(self):
        for name in ("finetune", "lwf", "lwf+ocdm", "erd", "erd+ocdm",
                     "yolo-lwf", "yolo-lwf+ocdm"):
            m = method_from_name(name)
            assert m.name == name
            assert m.use_memory == name.endswith("+ocdm")

    def test_unknown_rejected(self):
        with pytest.raises(ValueError, match="valid"):
            method_from_name("magic")


@pytest.fixture(scope="module")
def tiny_world(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    spec = SceneSpec(canvas_size=64, num_classes=4, max_objects=2, seed=11)
    anns = generate_dataset(spec, num_train=12, num_test=8, out_dir=out)
    return out, anns


def tiny_cfg(epochs=2):
    return TrainConfig(epochs=epochs, batch_size=4, warmup_epochs=1, augment=False)


class TestTrainTask:
    def test_teacher_bitwise_constant(self, tiny_world):
        out, anns = tiny_world
        grid = GridSpec(64, (8, 16))
        model = ToyDetector(grid, 4, 8, 8)
        teacher = TeacherSnapshot(ToyDetector(grid, 4, 8, 8), 0)
        before = teacher.checksum()
        items = [x for x in dataset_items(anns["train"], out / "images") if x[1].boxes]
        method = method_from_name("yolo-lwf")
        train_task(model, teacher, items[:6], None, method, tiny_cfg(),
                   ClassMask.all_active(4), seed=0)
        assert teacher.checksum() == before

    def test_beta_zero_no_memory_equals_finetune(self, tiny_world):
        # same seed, distillation weights forced to zero -> identical weights
        out, anns = tiny_world
        grid = GridSpec(64, (8, 16))
        items = [x for x in dataset_items(anns["train"], out / "images") if x[1].boxes]

        def run(method):
            torch.manual_seed(123)
            model = ToyDetector(grid, 4, 8, 8)
            teacher = TeacherSnapshot(model, 0) if method.distill_kind != "none" else None
            train_task(model, teacher, items[:6], None, method, tiny_cfg(),
                       ClassMask.all_active(4), seed=7)
            return torch.cat([p.reshape(-1) for p in model.parameters()])

        from cldet.distill import DistillConfig

        ft = run(method_from_name("finetune"))
        zeroed = MethodConfig("yolo-lwf", "yolo", use_mask=False,
                              distill=DistillConfig(beta1=0.0, beta2=0.0))
        lw = run(zeroed)
        assert torch.equal(ft, lw)

    def test_geometry_mismatch_rejected(self, tiny_world):
        out, anns = tiny_world
        model = ToyDetector(GridSpec(64, (8, 16)), 4, 8, 8)
        teacher = TeacherSnapshot(ToyDetector(GridSpec(64, (8,)), 4, 8, 8), 0)
        with pytest.raises(ValueError, match="geometry"):
            train_task(model, teacher, [], None, method_from_name("yolo-lwf"),
                       tiny_cfg(), ClassMask.all_active(4))

    def test_loss_logged_per_epoch(self, tiny_world):
        out, anns = tiny_world
        model = ToyDetector(GridSpec(64, (8, 16)), 4, 8, 8)
        items = [x for x in dataset_items(anns["train"], out / "images") if x[1].boxes]
        logs = train_task(model, None, items[:4], None, method_from_name("finetune"),
                          tiny_cfg(epochs=3), ClassMask.all_active(4), seed=1)
        assert len(logs["epoch_loss"]) == 3
        assert all(v >= 0 for v in logs["epoch_loss"])


class TestEvaluate:
    def test_all_is_union_not_mean(self, tiny_world):
        # craft a model-free check through the public evaluate() contract is
        # heavy; instead verify directly on the mAP layer that "all" uses the
        # union by picking splits with different class counts
        from cldet.detector import Box
        from cldet.evalmap import mean_average_precision

        gt = {0: [Box(0, 0, 10, 10, 0), Box(20, 20, 30, 30, 1), Box(40, 40, 50, 50, 2)]}
        preds = {0: [Box(0, 0, 10, 10, 0, 1.0)]}  # only class 0 found
        old = mean_average_precision(preds, gt, [0], [0.5])
        new = mean_average_precision(preds, gt, [1, 2], [0.5])
        allm = mean_average_precision(preds, gt, [0, 1, 2], [0.5])
        assert old == pytest.approx(1.0) and new == 0.0
        assert allm == pytest.approx(1 / 3)
        assert allm != pytest.approx((old + new) / 2)

    def test_evaluate_runs_on_model(self, tiny_world):
        out, anns = tiny_world
        model = ToyDetector(GridSpec(64, (8, 16)), 4, 8, 8)
        items = dataset_items(anns["test"], out / "images")
        old, new, allm = evaluate(model, items, ({0, 1}, {2, 3}), "map50")
        for v in (old, new, allm):
            assert 0.0 <= v <= 1.0


class TestRunScenario:
    def test_two_task_flow_produces_reports_and_checkpoints(self, tiny_world, tmp_path):
        out, anns = tiny_world
        schedule = build_schedule(4, 2, 2)
        method = method_from_name("yolo-lwf+ocdm")
        result = run_scenario(
            anns["train"], anns["test"], out / "images", schedule, method,
            GridSpec(64, (8, 16)), num_bins=8, width=8,
            train_cfg=tiny_cfg(), seed=0, memory_capacity=4,
            checkpoint_dir=tmp_path,
        )
        assert len(result.entries) == 2
        assert result.entries[0].task_index == 0
        assert (tmp_path / "task0.pt").exists() and (tmp_path / "task1.pt.json").exists()
        for e in result.entries:
            assert 0.0 <= e.old_map <= 1.0
            assert 0.0 <= e.all_map <= 1.0

    def test_determinism_same_seed(self, tiny_world):
        out, anns = tiny_world
        schedule = build_schedule(4, 2, 2)
        method = method_from_name("finetune")

        def run():
            return run_scenario(
                anns["train"], anns["test"], out / "images", schedule, method,
                GridSpec(64, (8, 16)), 8, 8, tiny_cfg(), seed=3,
            ).entries

        a, b = run(), run()
        assert [(e.old_map, e.new_map, e.all_map) for e in a] == [
            (e.old_map, e.new_map, e.all_map) for e in b
        ]
