import numpy as np
import pytest

from xpbench.errors import InvalidInputError, MissingStudentError, ParseError
from xpbench.featgen import (
    FEATURE_NAMES,
    CourseSchedule,
    EventLog,
    ExtractConfig,
    FeatureTensor,
    GradeBook,
    extract_features,
    normalize,
    parse_event_log,
    parse_gradebook,
    parse_schedule,
    read_feature_csv,
    week_of_times,
    write_event_log,
    write_feature_csv,
    write_gradebook,
    write_schedule,
)

F = {name: i for i, name in enumerate(FEATURE_NAMES)}
WEEK = 604800.0


def simple_schedule(weeks=2, videos=4, quizzes=2, first_boundary=None):
    vids = tuple(tuple(f"w{k}v{j}" for j in range(videos)) for k in range(1, weeks + 1))
    quiz = tuple(tuple(f"w{k}q{j}" for j in range(quizzes)) for k in range(1, weeks + 1))
    bounds = [k * WEEK for k in range(1, weeks + 1)]
    if first_boundary is not None:
        bounds[0] = first_boundary
    return CourseSchedule(weeks, vids, quiz, tuple(bounds))


def gradebook(ids, weeks=2):
    return GradeBook(tuple(ids), np.zeros((len(ids), weeks)))


class TestParsing:
    def test_well_formed_three_rows(self, tmp_path):
        path = tmp_path / "events.csv"
        path.write_text(
            "student_id,timestamp,action,object_id\n"
            "s1,30,Video.Play,w1v0\n"
            "s1,10,Video.Load,w1v0\n"
            "s2,5,Problem.Check,w1q0\n")
        log = parse_event_log(path)
        assert len(log) == 3
        times = [r[1] for r in log.records() if r[0] == "s1"]
        assert times == sorted(times)

    def test_unknown_action_names_row(self, tmp_path):
        path = tmp_path / "events.csv"
        path.write_text("student_id,timestamp,action,object_id\n"
                        "s1,10,Video.Load,v\n"
                        "s1,20,Video.Dance,v\n")
        with pytest.raises(ParseError, match="row 3"):
            parse_event_log(path)

    def test_non_numeric_timestamp(self, tmp_path):
        path = tmp_path / "events.csv"
        path.write_text("student_id,timestamp,action,object_id\n"
                        "s1,soon,Video.Load,v\n")
        with pytest.raises(ParseError, match="row 2"):
            parse_event_log(path)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "events.csv"
        path.write_text("student_id,timestamp,action,object_id\n"
                        "s1,10,Video.Load\n")
        with pytest.raises(ParseError, match="row 2"):
            parse_event_log(path)

    def test_sort_stable_for_equal_timestamps(self):
        log = EventLog.from_records([
            ("s1", 10.0, "Video.Play", "b"),
            ("s1", 10.0, "Video.Play", "a"),
        ])
        objects = [r[3] for r in log.records()]
        assert objects == ["b", "a"]  # input order preserved on ties

    def test_event_log_round_trip(self, tmp_path):
        log = EventLog.from_records([("s1", 1.5, "Video.Seek", "v"),
                                     ("s2", 0.0, "Problem.Check", "q")])
        write_event_log(log, tmp_path / "e.csv")
        back = parse_event_log(tmp_path / "e.csv")
        assert list(back.records()) == list(log.records())

    def test_schedule_round_trip(self, tmp_path):
        sched = simple_schedule()
        write_schedule(sched, tmp_path / "s.txt")
        back = parse_schedule(tmp_path / "s.txt")
        assert back == sched

    def test_schedule_rejects_duplicates(self):
        with pytest.raises(InvalidInputError):
            CourseSchedule(2, (("v",), ("v",)), ((), ()), (WEEK, 2 * WEEK))

    def test_gradebook_round_trip(self, tmp_path):
        book = GradeBook(("a", "b"), np.array([[0.5, 1.0], [0.0, 0.25]]))
        write_gradebook(book, tmp_path / "g.csv")
        back = parse_gradebook(tmp_path / "g.csv")
        assert back.student_ids == book.student_ids
        assert np.array_equal(back.grades, book.grades)


class TestFeatureValues:
    def test_student_speed_hand_trace(self):
        # two attempts on the same quiz at t=100 and t=400, both in week 2
        sched = simple_schedule(first_boundary=50.0)
        log = EventLog.from_records([
            ("s1", 100.0, "Problem.Check", "w2q0"),
            ("s1", 400.0, "Problem.Check", "w2q0"),
        ])
        tensor = extract_features(log, sched, gradebook(["s1"]), 2)
        assert tensor.data[0, 1, F["StudentSpeed"]] == pytest.approx(300.0)

    def test_content_alignment_counts_watched(self):
        # 3 of the 4 scheduled week-1 videos played
        sched = simple_schedule()
        log = EventLog.from_records([
            ("s1", 100.0 * (i + 1), "Video.Play", f"w1v{i}") for i in range(3)
        ])
        tensor = extract_features(log, sched, gradebook(["s1"]), 1)
        assert tensor.data[0, 0, F["ContentAlignment"]] == pytest.approx(3.0)
        assert tensor.data[0, 0, F["AvgWatchedWeeklyProp"]] == pytest.approx(0.75)

    def test_weekend_only_clicks_are_masked(self):
        # course starts Monday; day 5 is Saturday
        sched = simple_schedule()
        saturday = 5 * 86400.0 + 3600.0
        log = EventLog.from_records([
            ("s1", saturday, "Video.Play", "w1v0"),
            ("s1", saturday + 60, "Video.Pause", "w1v0"),
        ])
        tensor = extract_features(log, sched, gradebook(["s1"]), 1)
        cell = tensor.data[0, 0, F["RatioClicksWeekendDay"]]
        assert np.isnan(cell)
        assert tensor.nan_mask[0, 0, F["RatioClicksWeekendDay"]]
        assert tensor.data[0, 0, F["TotalClicksWeekend"]] == pytest.approx(2.0)

    def test_replay_counts_two_plays(self):
        sched = simple_schedule()
        log = EventLog.from_records([
            ("s1", 100.0, "Video.Play", "w1v0"),
            ("s1", 300.0, "Video.Play", "w1v0"),
            ("s1", 500.0, "Video.Play", "w1v1"),
        ])
        tensor = extract_features(log, sched, gradebook(["s1"]), 1)
        assert tensor.data[0, 0, F["AvgReplayedWeeklyProp"]] == pytest.approx(0.25)

    def test_time_on_task_capped_and_attributed(self):
        sched = simple_schedule()
        log = EventLog.from_records([
            ("s1", 0.0, "Video.Play", "w1v0"),
            ("s1", 600.0, "Problem.Check", "w1q0"),   # 600s of video time
            ("s1", 5000.0, "Video.Load", "w1v1"),     # 1800s cap on problem time
        ])
        tensor = extract_features(log, sched, gradebook(["s1"]), 1)
        assert tensor.data[0, 0, F["TotalTimeVideo"]] == pytest.approx(600.0)
        assert tensor.data[0, 0, F["TotalTimeProblem"]] == pytest.approx(1800.0)

    def test_sessions_split_on_gap(self):
        gap = 1800.0
        sched = simple_schedule()
        log = EventLog.from_records([
            ("s1", 0.0, "Video.Play", "w1v0"),
            ("s1", 100.0, "Video.Pause", "w1v0"),
            ("s1", 100.0 + gap + 500.0, "Video.Play", "w1v1"),  # new session
        ])
        tensor = extract_features(log, sched, gradebook(["s1"]), 1)
        assert tensor.data[0, 0, F["NumberOfSessions"]] == pytest.approx(2.0)
        # gap between end of session 1 (t=100) and start of session 2
        assert tensor.data[0, 0, F["AvgTimeSessions"]] == pytest.approx(gap + 500.0)

    def test_missing_student_error(self):
        sched = simple_schedule()
        log = EventLog.from_records([("ghost", 1.0, "Video.Play", "w1v0")])
        with pytest.raises(MissingStudentError):
            extract_features(log, sched, gradebook(["s1"]), 1)

    def test_empty_log_gives_inactive_rows(self):
        sched = simple_schedule()
        tensor = extract_features(EventLog.from_records([]), sched,
                                  gradebook(["s1", "s2"]), 2)
        assert tensor.data.shape == (2, 2, len(FEATURE_NAMES))
        assert np.all(tensor.data[:, :, F["NumberOfSessions"]] == 0.0)
        assert np.all(np.isnan(tensor.data[:, :, F["AvgTimeSessions"]]))


class TestNormalize:
    def _tensor(self, column):
        data = np.array(column, dtype=float).reshape(-1, 1, 1)
        return FeatureTensor(data, ("x",), tuple(f"s{i}" for i in range(len(column))))

    def test_linear_scaling(self):
        out = normalize(self._tensor([2.0, 4.0, 6.0]))
        assert out.data[:, 0, 0] == pytest.approx([0.0, 0.5, 1.0])

    def test_constant_feature_maps_to_zero(self):
        out = normalize(self._tensor([5.0, 5.0, 5.0]))
        assert np.array_equal(out.data[:, 0, 0], np.zeros(3))

    def test_nan_replaced_by_minimum_before_scaling(self):
        out = normalize(self._tensor([1.0, np.nan, 3.0]))
        assert out.data[:, 0, 0] == pytest.approx([0.0, 0.0, 1.0])
        assert out.nan_mask[1, 0, 0]

    def test_idempotent(self, course7):
        tensor = course7["tensor"]  # already normalized
        again = normalize(tensor)
        assert np.array_equal(again.data, tensor.data)

    def test_order_preserved(self):
        rng = np.random.default_rng(3)
        raw = rng.normal(0, 10, (20, 1, 1))
        out = normalize(FeatureTensor(raw, ("x",), tuple(f"s{i}" for i in range(20))))
        assert np.array_equal(np.argsort(raw[:, 0, 0]), np.argsort(out.data[:, 0, 0]))

    def test_all_values_in_unit_interval(self, course7):
        data = course7["tensor"].data
        assert np.isfinite(data).all()
        assert data.min() >= 0.0 and data.max() <= 1.0


class TestCausalityAndInvariance:
    def _base_records(self):
        return [
            ("s1", 100.0, "Video.Load", "w1v0"),
            ("s1", 160.0, "Video.Play", "w1v0"),
            ("s1", 400.0, "Problem.Check", "w1q0"),
            ("s1", 900.0, "Problem.Check", "w1q0"),
            ("s2", 50.0, "Video.Play", "w1v1"),
        ]

    def test_future_events_never_read(self):
        sched = simple_schedule()
        base = extract_features(EventLog.from_records(self._base_records()),
                                sched, gradebook(["s1", "s2"]), 1)
        noisy = self._base_records() + [
            ("s1", WEEK + 5.0, "Video.Play", "w2v0"),
            ("s2", WEEK + 90.0, "Problem.Check", "w2q1"),
        ]
        extended = extract_features(EventLog.from_records(noisy), sched,
                                    gradebook(["s1", "s2"]), 1)
        assert np.array_equal(base.data, extended.data, equal_nan=True)

    def test_record_order_invariance_with_ties(self):
        sched = simple_schedule()
        records = self._base_records() + [
            ("s1", 400.0, "Video.Play", "w1v2"),  # ties the Problem.Check
        ]
        rng = np.random.default_rng(9)
        base = extract_features(EventLog.from_records(records), sched,
                                gradebook(["s1", "s2"]), 1)
        for _ in range(5):
            shuffled = [records[i] for i in rng.permutation(len(records))]
            out = extract_features(EventLog.from_records(shuffled), sched,
                                   gradebook(["s1", "s2"]), 1)
            assert np.array_equal(base.data, out.data, equal_nan=True)

    def test_week_of_times_boundaries(self):
        bounds = (100.0, 200.0)
        assert list(week_of_times([0.0, 100.0, 100.5, 200.0], bounds)) == [1, 1, 2, 2]


class TestTensorIO:
    def test_csv_round_trip(self, tmp_path, course7):
        tensor = course7["tensor"]
        write_feature_csv(tensor, tmp_path / "t.csv")
        back = read_feature_csv(tmp_path / "t.csv")
        assert back.student_ids == tensor.student_ids
        assert back.feature_names == tensor.feature_names
        assert np.array_equal(back.data, tensor.data)

    def test_extra_feature_columns(self, course7):
        tensor = course7["tensor"]
        extra = np.zeros((tensor.student_count, tensor.week_count, 1))
        wider = tensor.with_extra_features(("Custom",), extra)
        assert wider.feature_count == tensor.feature_count + 1
        assert wider.feature_names[-1] == "Custom"
