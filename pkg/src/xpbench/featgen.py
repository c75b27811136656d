"""Weekly behavioral features from raw interaction logs.

The extractor turns a clickstream (video and quiz events) plus a course
schedule and gradebook into a students x weeks x features tensor.  Feature
definitions are fixed here once and documented on the functions that compute
them; cells that are undefined for a student-week (no sessions, no scheduled
videos, division by zero) become NaN and are recorded in the tensor's mask.
Normalization replaces NaNs by the per-feature minimum and min-max scales
every feature into [0, 1] using the global (all students, all weeks) range.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, MissingStudentError, ParseError

ACTIONS = (
    "Video.Load",
    "Video.Play",
    "Video.Pause",
    "Video.Stop",
    "Video.Seek",
    "Video.SpeedChange",
    "Problem.Check",
)
_ACTION_CODE = {a: i for i, a in enumerate(ACTIONS)}
_LOAD = _ACTION_CODE["Video.Load"]
_PLAY = _ACTION_CODE["Video.Play"]
_CHECK = _ACTION_CODE["Problem.Check"]

FEATURE_NAMES = (
    # regularity
    "DelayLecture",
    "RegPeakTimeDayHour",
    "RegPeriodicityM1",
    # engagement
    "AvgTimeSessions",
    "NumberOfSessions",
    "RatioClicksWeekendDay",
    "StdTimeSessions",
    "TotalClicksProblem",
    "TotalClicksWeekend",
    "TotalTimeProblem",
    "TotalTimeVideo",
    "StdTimeBetweenSessions",
    # control
    "AvgReplayedWeeklyProp",
    "AvgWatchedWeeklyProp",
    "FrequencyEventLoad",
    # participation
    "CompetencyAnticipation",
    "ContentAlignment",
    "ContentAnticipation",
    "StudentSpeed",
)
_F = {name: i for i, name in enumerate(FEATURE_NAMES)}

SCHEDULE_HEADER = "XPB-SCHEDULE v1"
DAY_SECONDS = 86400.0
HOUR_SECONDS = 3600.0


@dataclass(frozen=True)
class ExtractConfig:
    """Extraction thresholds; defaults are the standard MOOC conventions."""

    session_gap_seconds: float = 1800.0   # events closer than this share a session
    time_cap_seconds: float = 1800.0      # cap on inter-event gaps counted as time-on-task
    start_weekday: int = 0                # weekday of course start, Monday=0


@dataclass(frozen=True)
class EventLog:
    """Time-ordered interaction records, column oriented.

    Rows are sorted by (student, timestamp); the sort is stable, so records
    with equal timestamps keep their input order.
    """

    student: np.ndarray
    time: np.ndarray
    action: np.ndarray  # int codes into ACTIONS
    object_id: np.ndarray

    def __post_init__(self):
        n = len(self.student)
        if not (len(self.time) == len(self.action) == len(self.object_id) == n):
            raise InvalidInputError("event columns must have equal length")
        if n and np.min(self.time) < 0:
            raise InvalidInputError("timestamps must be non-negative")

    @classmethod
    def from_records(cls, records):
        """Build a log from (student_id, timestamp, action, object_id) tuples."""
        records = list(records)
        students = np.array([r[0] for r in records], dtype=object)
        times = np.array([float(r[1]) for r in records], dtype=float)
        actions = np.empty(len(records), dtype=np.int8)
        for i, r in enumerate(records):
            code = _ACTION_CODE.get(r[2])
            if code is None:
                raise InvalidInputError(f"unknown action {r[2]!r}")
            actions[i] = code
        objects = np.array([r[3] for r in records], dtype=object)
        if records:
            order = np.lexsort((times, students))  # stable; last key is primary
        else:
            order = np.array([], dtype=int)
        return cls(students[order], times[order], actions[order], objects[order])

    def __len__(self):
        return len(self.student)

    def records(self):
        """Yield rows back as (student_id, timestamp, action, object_id)."""
        for i in range(len(self)):
            yield (self.student[i], float(self.time[i]),
                   ACTIONS[self.action[i]], self.object_id[i])


def parse_event_log(path):
    """Parse the event CSV ``student_id,timestamp,action,object_id``.

    Raises ParseError with the offending row number on unknown actions,
    non-numeric or negative timestamps, or missing columns.
    """
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["student_id", "timestamp", "action", "object_id"]:
            raise ParseError(f"bad header {header}", row=1)
        for n, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"expected 4 columns, got {len(row)}", row=n)
            sid, ts, action, oid = row
            try:
                t = float(ts)
            except ValueError:
                raise ParseError(f"non-numeric timestamp {ts!r}", row=n) from None
            if t < 0:
                raise ParseError(f"negative timestamp {ts}", row=n)
            if action not in _ACTION_CODE:
                raise ParseError(f"unknown action {action!r}", row=n)
            records.append((sid, t, action, oid))
    return EventLog.from_records(records)


def write_event_log(log, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id", "timestamp", "action", "object_id"])
        for sid, t, action, oid in log.records():
            writer.writerow([sid, repr(float(t)), action, oid])


@dataclass(frozen=True)
class CourseSchedule:
    """Weekly catalog of video/quiz object ids and end-of-week boundaries."""

    week_count: int
    videos: tuple      # per week: tuple of video object ids
    quizzes: tuple     # per week: tuple of quiz object ids
    boundaries: tuple  # end time of each week, strictly increasing

    def __post_init__(self):
        if self.week_count < 1:
            raise InvalidInputError("week_count must be >= 1")
        if not (len(self.videos) == len(self.quizzes)
                == len(self.boundaries) == self.week_count):
            raise InvalidInputError("per-week lists must match week_count")
        bounds = np.asarray(self.boundaries, dtype=float)
        if np.any(np.diff(bounds) <= 0) or bounds[0] <= 0:
            raise InvalidInputError("boundaries must be strictly increasing and positive")
        seen = set()
        for ids in (*self.videos, *self.quizzes):
            for oid in ids:
                if oid in seen:
                    raise InvalidInputError(f"duplicate scheduled object {oid!r}")
                seen.add(oid)

    def week_start(self, week):
        return 0.0 if week == 1 else float(self.boundaries[week - 2])

    def week_of_object(self):
        """Map object id -> (1-based week, is_video)."""
        table = {}
        for w in range(self.week_count):
            for oid in self.videos[w]:
                table[oid] = (w + 1, True)
            for oid in self.quizzes[w]:
                table[oid] = (w + 1, False)
        return table


def parse_schedule(path):
    """Parse the versioned schedule text format (XPB-SCHEDULE v1)."""
    weeks = {}
    boundaries = {}
    with open(path) as fh:
        lines = [line.strip() for line in fh]
    if not lines or lines[0] != SCHEDULE_HEADER:
        raise ParseError(f"expected header {SCHEDULE_HEADER!r}", row=1)
    for n, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split()
        if parts[0] == "week" and len(parts) == 4 and parts[2] in ("video", "quiz"):
            k = _parse_int(parts[1], n)
            weeks.setdefault(k, {"video": [], "quiz": []})[parts[2]].append(parts[3])
        elif parts[0] == "boundary" and len(parts) == 3:
            k = _parse_int(parts[1], n)
            try:
                boundaries[k] = float(parts[2])
            except ValueError:
                raise ParseError(f"bad boundary value {parts[2]!r}", row=n) from None
        else:
            raise ParseError(f"unrecognized schedule line {line!r}", row=n)
    if not boundaries:
        raise ParseError("schedule has no boundary lines")
    week_count = max(boundaries)
    if sorted(boundaries) != list(range(1, week_count + 1)):
        raise ParseError("boundary lines must cover weeks 1..W")
    videos, quizzes = [], []
    for k in range(1, week_count + 1):
        entry = weeks.get(k, {"video": [], "quiz": []})
        videos.append(tuple(entry["video"]))
        quizzes.append(tuple(entry["quiz"]))
    return CourseSchedule(week_count, tuple(videos), tuple(quizzes),
                          tuple(boundaries[k] for k in range(1, week_count + 1)))


def _parse_int(token, row):
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"expected integer, got {token!r}", row=row) from None


def write_schedule(schedule, path):
    lines = [SCHEDULE_HEADER]
    for w in range(schedule.week_count):
        for oid in schedule.videos[w]:
            lines.append(f"week {w + 1} video {oid}")
        for oid in schedule.quizzes[w]:
            lines.append(f"week {w + 1} quiz {oid}")
        lines.append(f"boundary {w + 1} {repr(float(schedule.boundaries[w]))}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class GradeBook:
    """Per-student weekly grades in [0, 1]; non-attempted assignments are 0."""

    student_ids: tuple
    grades: np.ndarray  # (S, W)

    def __post_init__(self):
        grades = np.asarray(self.grades, dtype=float)
        if grades.ndim != 2 or grades.shape[0] != len(self.student_ids):
            raise InvalidInputError("grades must be (students, weeks)")
        if grades.size and (np.nanmin(grades) < 0 or np.nanmax(grades) > 1):
            raise InvalidInputError("grades must lie in [0, 1]")
        object.__setattr__(self, "grades", grades)
        object.__setattr__(self, "student_ids", tuple(self.student_ids))

    def row(self, student_id):
        return self.grades[self.student_ids.index(student_id)]


def parse_gradebook(path):
    """Parse the gradebook CSV ``student_id,g1,...,gW``."""
    ids, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "student_id":
            raise ParseError("expected header student_id,g1,...,gW", row=1)
        width = len(header) - 1
        for n, row in enumerate(reader, start=2):
            if len(row) != width + 1:
                raise ParseError("wrong column count", row=n)
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), row=n) from None
            ids.append(row[0])
    return GradeBook(tuple(ids), np.array(rows, dtype=float).reshape(len(ids), width))


def write_gradebook(book, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id"] + [f"g{w + 1}" for w in range(book.grades.shape[1])])
        for sid, row in zip(book.student_ids, book.grades):
            writer.writerow([sid, *[repr(float(g)) for g in row]])


@dataclass(frozen=True)
class FeatureTensor:
    """students x weeks x features array with names, bounds and NaN mask."""

    data: np.ndarray
    feature_names: tuple
    student_ids: tuple
    feature_min: np.ndarray = None
    feature_max: np.ndarray = None
    nan_mask: np.ndarray = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3:
            raise InvalidInputError("tensor data must be (students, weeks, features)")
        if data.shape[0] != len(self.student_ids) or data.shape[2] != len(self.feature_names):
            raise InvalidInputError("tensor axes must match ids and names")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "student_ids", tuple(self.student_ids))
        if self.nan_mask is None:
            object.__setattr__(self, "nan_mask", np.isnan(data))
        if self.feature_min is None:
            object.__setattr__(self, "feature_min", _nan_bound(data, np.nanmin))
        if self.feature_max is None:
            object.__setattr__(self, "feature_max", _nan_bound(data, np.nanmax))

    @property
    def week_count(self):
        return self.data.shape[1]

    @property
    def feature_count(self):
        return self.data.shape[2]

    @property
    def student_count(self):
        return self.data.shape[0]

    def flat_matrix(self):
        """(students, weeks*features) week-major view of the data."""
        return self.data.reshape(self.student_count, -1)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=int)
        return FeatureTensor(self.data[indices],
                             self.feature_names,
                             tuple(self.student_ids[i] for i in indices),
                             self.feature_min, self.feature_max,
                             self.nan_mask[indices])

    def with_extra_features(self, names, values):
        """Append extra per-(student, week) feature columns."""
        values = np.asarray(values, dtype=float)
        if values.shape != (self.student_count, self.week_count, len(names)):
            raise InvalidInputError("extra feature block has wrong shape")
        return FeatureTensor(np.concatenate([self.data, values], axis=2),
                             self.feature_names + tuple(names),
                             self.student_ids)


def _nan_bound(data, fn):
    flat = data.reshape(-1, data.shape[2])
    out = np.empty(data.shape[2])
    for f in range(data.shape[2]):
        col = flat[:, f]
        good = col[~np.isnan(col)]
        out[f] = fn(good) if good.size else np.nan
    return out


def week_of_times(times, boundaries):
    """1-based week index for each timestamp; week w is (t_{w-1}, t_w]."""
    return np.searchsorted(np.asarray(boundaries, dtype=float),
                           np.asarray(times, dtype=float), side="left") + 1


def extract_features(log, schedule, grades, up_to_week, config=ExtractConfig()):
    """Compute the behavioral feature tensor for weeks 1..up_to_week.

    Only events with timestamp <= the up_to_week boundary are read, and each
    week's cell depends only on events up to that week's end, so appending
    future events never changes the output.  Events with equal timestamps are
    canonicalized by (action, object) before computation, making the result
    invariant to input record order.  Students present in the gradebook but
    absent from the log get all-NaN rows.
    """
    if up_to_week < 1 or up_to_week > schedule.week_count:
        raise InvalidInputError(f"up_to_week must be in 1..{schedule.week_count}")
    students = grades.student_ids
    horizon = float(schedule.boundaries[up_to_week - 1])

    known = set(students)
    if len(log):
        for sid in np.unique(log.student):
            if sid not in known:
                raise MissingStudentError(f"student {sid!r} missing from gradebook")

    data = np.full((len(students), up_to_week, len(FEATURE_NAMES)), np.nan)

    if len(log):
        keep = log.time <= horizon
        # canonical order: student, time, then content tie-breaks
        order = np.lexsort((log.object_id[keep], log.action[keep],
                            log.time[keep], log.student[keep]))
        students_arr = log.student[keep][order]
        times = log.time[keep][order]
        actions = log.action[keep][order]
        objects = log.object_id[keep][order]
    else:
        students_arr = np.array([], dtype=object)
        times = np.array([])
        actions = np.array([], dtype=np.int8)
        objects = np.array([], dtype=object)

    uniq, starts = np.unique(students_arr, return_index=True)
    slice_of = {sid: (starts[u], starts[u + 1] if u + 1 < len(starts) else len(students_arr))
                for u, sid in enumerate(uniq)}
    for i, sid in enumerate(students):
        lo, hi = slice_of.get(sid, (0, 0))
        data[i] = _student_features(times[lo:hi], actions[lo:hi], objects[lo:hi],
                                    schedule, up_to_week, config)

    return FeatureTensor(data, FEATURE_NAMES, students)


def _entropy_peakedness(hours):
    """1 - normalized Shannon entropy of the 24-bin hour-of-day histogram."""
    hist = np.bincount(hours, minlength=24).astype(float)
    total = hist.sum()
    if total == 0:
        return np.nan
    p = hist[hist > 0] / total
    return 1.0 - float(-(p * np.log(p)).sum() / np.log(24.0))


def _fourier_day_magnitude(times, week_start, week_end):
    """|first non-DC Fourier coefficient| of the hourly count series / total."""
    n_hours = int(np.ceil((week_end - week_start) / HOUR_SECONDS))
    if n_hours < 2 or times.size == 0:
        return np.nan
    idx = np.minimum(((times - week_start) / HOUR_SECONDS).astype(int), n_hours - 1)
    series = np.bincount(idx, minlength=n_hours).astype(float)
    total = series.sum()
    if total == 0:
        return np.nan
    return float(np.abs(np.fft.rfft(series)[1]) / total)


def _student_features(times, actions, objects, schedule, up_to_week, config):
    """Feature grid (weeks, F) for one student's canonically ordered events."""
    W = up_to_week
    out = np.full((W, len(FEATURE_NAMES)), np.nan)
    boundaries = np.asarray(schedule.boundaries[:W], dtype=float)
    weeks = week_of_times(times, schedule.boundaries)  # 1-based
    obj_table = schedule.week_of_object()

    is_video = actions != _CHECK
    days = np.floor(times / DAY_SECONDS).astype(int)
    weekend = ((config.start_weekday + days) % 7) >= 5
    hours = (np.floor(times / HOUR_SECONDS) % 24).astype(int)

    # sessionization over the whole (filtered) stream
    if times.size:
        new_session = np.ones(times.size, dtype=bool)
        new_session[1:] = np.diff(times) >= config.session_gap_seconds
        session_id = np.cumsum(new_session) - 1
        s_start = times[new_session]
        end_idx = np.flatnonzero(new_session)[1:] - 1
        s_end = np.concatenate([times[end_idx], [times[-1]]])
        s_week = week_of_times(s_start, schedule.boundaries)
        gaps = s_start[1:] - s_end[:-1]
        gap_week = s_week[1:]  # gap belongs to the week of the later session
    else:
        s_week = np.array([], dtype=int)
        gaps = np.array([])
        gap_week = np.array([], dtype=int)

    sched_weeks = np.array([obj_table.get(o, (0, True))[0] for o in objects],
                           dtype=int)
    sched_video = np.array([obj_table.get(o, (0, True))[1] for o in objects],
                           dtype=bool)

    for w in range(1, W + 1):
        row = out[w - 1]
        in_week = weeks == w
        wk_times = times[in_week]
        wk_actions = actions[in_week]
        wk_objects = objects[in_week]
        wk_weekend = weekend[in_week]
        n_events = wk_times.size
        week_start = schedule.week_start(w)
        week_end = float(boundaries[w - 1])

        # sessions
        row[_F["NumberOfSessions"]] = float(np.sum(s_week == w))
        wk_gaps = gaps[gap_week == w]
        if wk_gaps.size:
            row[_F["AvgTimeSessions"]] = float(wk_gaps.mean())
            row[_F["StdTimeSessions"]] = float(wk_gaps.std())
        hist_gaps = gaps[gap_week <= w]
        if hist_gaps.size:
            row[_F["StdTimeBetweenSessions"]] = float(hist_gaps.std())

        # regularity
        if n_events:
            row[_F["RegPeakTimeDayHour"]] = _entropy_peakedness(hours[in_week])
        row[_F["RegPeriodicityM1"]] = _fourier_day_magnitude(wk_times, week_start, week_end)

        # clicks; counts are 0 for an inactive week, only ratios go undefined
        wk_weekend_clicks = float(np.sum(wk_weekend))
        weekday_clicks = n_events - wk_weekend_clicks
        row[_F["TotalClicksWeekend"]] = wk_weekend_clicks
        if weekday_clicks > 0:
            row[_F["RatioClicksWeekendDay"]] = wk_weekend_clicks / weekday_clicks
        row[_F["TotalClicksProblem"]] = float(np.sum(wk_actions == _CHECK))
        if n_events:
            row[_F["FrequencyEventLoad"]] = float(np.sum(wk_actions == _LOAD)) / n_events

        # time on task: gaps between consecutive events inside the week,
        # capped, attributed to the earlier event's object kind
        pair_gaps = np.minimum(np.diff(wk_times), config.time_cap_seconds)
        lead_video = (wk_actions != _CHECK)[:-1]
        row[_F["TotalTimeVideo"]] = float(pair_gaps[lead_video].sum())
        row[_F["TotalTimeProblem"]] = float(pair_gaps[~lead_video].sum())

        # control + participation over the week's scheduled videos
        wk_videos = schedule.videos[w - 1]
        wk_sched = sched_weeks[in_week]
        wk_is_video = sched_video[in_week]
        plays = wk_actions == _PLAY
        if wk_videos:
            play_counts = {}
            for oid in wk_objects[plays & (wk_sched == w)]:
                play_counts[oid] = play_counts.get(oid, 0) + 1
            watched = sum(1 for v in wk_videos if play_counts.get(v, 0) >= 1)
            replayed = sum(1 for v in wk_videos if play_counts.get(v, 0) >= 2)
            row[_F["AvgWatchedWeeklyProp"]] = watched / len(wk_videos)
            row[_F["AvgReplayedWeeklyProp"]] = replayed / len(wk_videos)
            row[_F["ContentAlignment"]] = float(watched)

        # anticipation: week-w activity on objects scheduled after week w
        future = wk_sched > w
        row[_F["ContentAnticipation"]] = float(
            len(set(wk_objects[plays & future & wk_is_video])))
        later_quizzes = sum(len(schedule.quizzes[k]) for k in range(w, schedule.week_count))
        if later_quizzes:
            row[_F["CompetencyAnticipation"]] = (
                float(np.sum((wk_actions == _CHECK) & future & ~wk_is_video))
                / later_quizzes)

        # quiz pacing: consecutive attempts on the same quiz within the week
        check_mask = wk_actions == _CHECK
        speed_gaps = []
        for oid in sorted(set(wk_objects[check_mask])):
            ts = np.sort(wk_times[check_mask & (wk_objects == oid)])
            if ts.size >= 2:
                speed_gaps.extend(np.diff(ts))
        if speed_gaps:
            row[_F["StudentSpeed"]] = float(np.mean(speed_gaps))

        # lecture delay: first event on each week-w video, by the week-w horizon
        delays = []
        for v in wk_videos:
            hits = times[(objects == v) & (times <= week_end)]
            if hits.size:
                delays.append((hits[0] - week_start) / DAY_SECONDS)
        if delays:
            row[_F["DelayLecture"]] = float(np.mean(delays))

    return out


def normalize(tensor):
    """Min-max scale every feature into [0, 1] over all students and weeks.

    NaN cells are replaced by the per-feature minimum before scaling (so they
    land at 0); constant features map to 0.  Idempotent.
    """
    if tensor.student_count < 1:
        raise InvalidInputError("tensor must contain at least one student")
    data = tensor.data.copy()
    F = tensor.feature_count
    lo = np.empty(F)
    hi = np.empty(F)
    for f in range(F):
        col = data[:, :, f]
        good = col[~np.isnan(col)]
        if good.size == 0:
            data[:, :, f] = 0.0
            lo[f] = hi[f] = 0.0
            continue
        lo[f], hi[f] = float(good.min()), float(good.max())
        col = np.where(np.isnan(col), lo[f], col)
        if hi[f] > lo[f]:
            data[:, :, f] = (col - lo[f]) / (hi[f] - lo[f])
        else:
            data[:, :, f] = 0.0
    return FeatureTensor(data, tensor.feature_names, tensor.student_ids,
                         lo, hi, tensor.nan_mask.copy())


def write_feature_csv(tensor, path):
    """Export as ``student_id,week,<feature...>`` rows (NaN written as nan)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id", "week", *tensor.feature_names])
        for s, sid in enumerate(tensor.student_ids):
            for w in range(tensor.week_count):
                writer.writerow([sid, w + 1,
                                 *[repr(float(v)) for v in tensor.data[s, w]]])


def read_feature_csv(path):
    ids = []
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["student_id", "week"]:
            raise ParseError("expected header student_id,week,<features>", row=1)
        names = tuple(header[2:])
        for n, row in enumerate(reader, start=2):
            if len(row) != 2 + len(names):
                raise ParseError("wrong column count", row=n)
            sid = row[0]
            try:
                week = int(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(str(exc), row=n) from None
            if sid not in rows:
                ids.append(sid)
                rows[sid] = {}
            rows[sid][week] = vals
    if not ids:
        return FeatureTensor(np.zeros((0, 0, len(names))), names, ())
    week_count = max(max(w) for w in rows.values())
    data = np.full((len(ids), week_count, len(names)), np.nan)
    for s, sid in enumerate(ids):
        for w, vals in rows[sid].items():
            data[s, w - 1] = vals
    return FeatureTensor(data, names, tuple(ids))
