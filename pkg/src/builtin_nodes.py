"""
Built-in node logic for the telemonitoring study pipelines.

Every node is a deterministic function of its input artifacts and
parameters: `logic(inputs, params, ctx) -> {output_port: artifact}`.
Tables travel as pandas DataFrames; timestamps stay RFC 3339 UTC strings.
"""
import logging
from datetime import timedelta
from typing import Any, Dict, List

import pandas as pd

from src.datastore import MetadataFilter
from utils.timeutil import floor_utc, format_utc, parse_utc

logger = logging.getLogger(__name__)

WINDOW_STEPS = {'hour': timedelta(hours=1), 'day': timedelta(days=1)}
WINDOW_STATS = ('mean', 'sum', 'min', 'max', 'count', 'median')


def _window_start(value: str, window: str) -> str:
    return format_utc(floor_utc(parse_utc(value), window))


def _require_columns(frame: pd.DataFrame, columns: List[str], node: str) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ValueError(f"{node}: input table lacks columns {missing}")


def production_extract(inputs: Dict[str, Any], params: Dict[str, Any], ctx) -> Dict[str, Any]:
    """
    Production entries of one task as a table.

    Columns: participant_id, device_id, capture_time, then the payload fields
    (the `fields` parameter, or every payload key in sorted order).
    Consumed entry ids are recorded on the context for lineage.
    """
    entries = ctx.datastore.query_metadata(MetadataFilter(
        study_id=ctx.study_id,
        task_id=params['task_id'],
        lifecycle='production',
    ))
    fields = params.get('fields') or sorted({key for e in entries for key in e.inline_fields})
    columns = ['participant_id', 'device_id', 'capture_time'] + list(fields)
    rows = []
    for entry in entries:
        row = {'participant_id': entry.participant_id, 'device_id': entry.device_id,
               'capture_time': entry.capture_time}
        row.update({name: entry.inline_fields.get(name) for name in fields})
        rows.append(row)
        ctx.consumed_entries.add(entry.entry_id)
    logger.debug(f"production_extract {params['task_id']}: {len(rows)} entries")
    return {'table': pd.DataFrame(rows, columns=columns), 'entry_count': len(rows)}


def window_stats(inputs: Dict[str, Any], params: Dict[str, Any], ctx) -> Dict[str, Any]:
    """Statistic of one value column per group and UTC hour/day window."""
    frame: pd.DataFrame = inputs['table']
    value_field = params['value_field']
    window = params.get('window') or 'day'
    stat = params.get('stat') or 'mean'
    group_by = list(params.get('group_by') or [])
    time_field = params.get('time_field') or 'capture_time'
    window_field = params.get('window_field') or 'window_start'
    output_field = params.get('output_field') or value_field
    if window not in WINDOW_STEPS:
        raise ValueError(f"window_stats: unknown window {window!r}")
    if stat not in WINDOW_STATS:
        raise ValueError(f"window_stats: unknown stat {stat!r}")

    out_columns = group_by + [window_field, output_field]
    if frame.empty:
        return {'table': pd.DataFrame(columns=out_columns)}
    _require_columns(frame, group_by + [time_field, value_field], 'window_stats')

    work = frame.loc[frame[value_field].notna(), group_by + [time_field, value_field]].copy()
    if work.empty:
        return {'table': pd.DataFrame(columns=out_columns)}
    work[window_field] = work[time_field].map(lambda v: _window_start(v, window))
    result = (
        work.groupby(group_by + [window_field], sort=True)[value_field]
        .agg(stat)
        .reset_index()
        .rename(columns={value_field: output_field})
    )
    return {'table': result[out_columns]}


def resample_fill(inputs: Dict[str, Any], params: Dict[str, Any], ctx) -> Dict[str, Any]:
    """
    Regular UTC buckets between the first and last observation of each
    group, forward-filling empty buckets with the last seen values.
    """
    frame: pd.DataFrame = inputs['table']
    time_field = params.get('time_field') or 'window_start'
    window = params.get('window') or 'day'
    group_by = list(params.get('group_by') or [])
    value_fields = list(params['value_fields'])
    if window not in WINDOW_STEPS:
        raise ValueError(f"resample_fill: unknown window {window!r}")
    out_columns = group_by + [time_field] + value_fields
    if frame.empty:
        return {'table': pd.DataFrame(columns=out_columns)}
    _require_columns(frame, group_by + [time_field] + value_fields, 'resample_fill')

    step = WINDOW_STEPS[window]
    rows = []
    groups = frame.groupby(group_by, sort=True) if group_by else [((), frame)]
    for key, part in groups:
        key = key if isinstance(key, tuple) else (key,)
        latest = {}
        for record in part.sort_values(time_field, kind='mergesort').to_dict('records'):
            latest[floor_utc(parse_utc(record[time_field]), window)] = {f: record[f] for f in value_fields}
        current, last = min(latest), max(latest)
        carried = latest[current]
        while current <= last:
            carried = latest.get(current, carried)
            row = dict(zip(group_by, key))
            row[time_field] = format_utc(current)
            row.update(carried)
            rows.append(row)
            current += step
    result = pd.DataFrame(rows, columns=out_columns)
    for name in value_fields:
        result[name] = result[name].astype(frame[name].dtype)
    return {'table': result}


def join_tables(inputs: Dict[str, Any], params: Dict[str, Any], ctx) -> Dict[str, Any]:
    left: pd.DataFrame = inputs['left']
    right: pd.DataFrame = inputs['right']
    on = list(params['on'])
    how = params.get('how') or 'inner'
    if how not in ('inner', 'left', 'outer'):
        raise ValueError(f"join_tables: unsupported join {how!r}")
    if left.empty and right.empty:
        columns = on + [c for c in left.columns if c not in on] + [c for c in right.columns if c not in on]
        return {'table': pd.DataFrame(columns=columns)}
    _require_columns(left, on, 'join_tables')
    _require_columns(right, on, 'join_tables')
    merged = left.merge(right, on=on, how=how, sort=True)
    return {'table': merged.reset_index(drop=True)}


def threshold_flag(inputs: Dict[str, Any], params: Dict[str, Any], ctx) -> Dict[str, Any]:
    frame: pd.DataFrame = inputs['table']
    field = params['field']
    threshold = float(params['threshold'])
    flag_field = params.get('flag_field') or f"{field}_flag"
    result = frame.copy()
    if frame.empty:
        result[flag_field] = pd.Series(dtype=bool)
        return {'table': result}
    _require_columns(frame, [field], 'threshold_flag')
    values = pd.to_numeric(frame[field], errors='coerce')
    if params.get('above', True):
        flags = values >= threshold if params.get('inclusive') else values > threshold
    else:
        flags = values <= threshold if params.get('inclusive') else values < threshold
    result[flag_field] = flags.fillna(False).astype(bool)
    return {'table': result}


def code_projection(inputs: Dict[str, Any], params: Dict[str, Any], ctx) -> Dict[str, Any]:
    """
    Select and rename columns into CODE field names.

    `columns` maps output name → source column; output rows are sorted by
    `sort_by` (default: every output column) for byte-stable datasets.
    """
    frame: pd.DataFrame = inputs['table']
    mapping: Dict[str, str] = params['columns']
    outputs = list(mapping)
    if frame.empty:
        return {'table': pd.DataFrame(columns=outputs)}
    _require_columns(frame, list(mapping.values()), 'code_projection')
    result = pd.DataFrame({out: frame[src] for out, src in mapping.items()}, columns=outputs)
    if params.get('drop_null', True):
        result = result.dropna()
    sort_by = list(params.get('sort_by') or outputs)
    result = result.sort_values(sort_by, kind='mergesort').reset_index(drop=True)
    return {'table': result}


ENTRYPOINTS = {
    'builtin.production_extract': production_extract,
    'builtin.window_stats': window_stats,
    'builtin.resample_fill': resample_fill,
    'builtin.join_tables': join_tables,
    'builtin.threshold_flag': threshold_flag,
    'builtin.code_projection': code_projection,
}
