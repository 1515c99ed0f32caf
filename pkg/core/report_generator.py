import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from jinja2 import Template

from core.jigsaw import TrainReport
from utils.file_operations import FileOperations

RUN_KEYS = ('variant', 'pe', 'lambda', 'seed', 'fold')
GROUP_KEYS = ('variant', 'pe', 'lambda')


class ReportGenerator:
    """Summary tables, training-curve figures and HTML run reports"""

    def __init__(self, out_dir: Union[str, Path] = 'runs'):
        self.logger = logging.getLogger(__name__)
        self.out_dir = Path(out_dir)
        self.files = FileOperations(self.out_dir)

    def summarize(self, rows: Sequence[Dict[str, Any]], group_by: Sequence[str] = GROUP_KEYS) -> pd.DataFrame:
        """
        Mean and standard deviation of every metric over repeated runs

        Args:
            rows: One dict per run holding the run keys (variant, pe, lambda, seed, fold) and final metrics
            group_by: Keys identifying one configuration; seeds and folds are averaged over

        Returns:
            One row per configuration with 'runs', '<metric>_mean' and '<metric>_std' columns
        """
        if not rows:
            raise ValueError("No runs to summarize")
        frame = pd.DataFrame(list(rows))
        keys = [k for k in group_by if k in frame.columns]
        metrics = [c for c in frame.columns if c not in RUN_KEYS and pd.api.types.is_numeric_dtype(frame[c])]
        if not metrics:
            raise ValueError("Runs carry no numeric metrics")

        grouped = frame.groupby(keys, sort=True, dropna=False) if keys else [((), frame)]
        summary_rows = []
        for key, group in grouped:
            key = key if isinstance(key, tuple) else (key,)
            row: Dict[str, Any] = dict(zip(keys, key))
            row['runs'] = len(group)
            for metric in metrics:
                values = group[metric].astype(float)
                row[f'{metric}_mean'] = float(values.mean())
                # single runs report a zero spread instead of NaN
                row[f'{metric}_std'] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
            summary_rows.append(row)
        summary = pd.DataFrame(summary_rows)
        self.logger.info(f"Summarized {len(frame)} runs into {len(summary)} configurations")
        return summary

    def export_summary(self, summary: pd.DataFrame, stem: str = 'summary') -> Dict[str, str]:
        return self.files.save_table(summary.round(6), stem)

    def plot_training_curves(self, report: TrainReport, path: Union[str, Path]) -> str:
        """Per-epoch task and equivalence loss, with held-out metrics on a second panel"""
        records = pd.DataFrame(report.to_records())
        if records.empty:
            raise ValueError("Training report has no epochs to plot")
        metric_columns = [c for c in records.columns if c not in ('epoch', 'task_loss', 'eqv_loss', 'lr')]

        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        axes[0].plot(records['epoch'], records['task_loss'], label='task loss')
        axes[0].plot(records['epoch'], records['eqv_loss'], label='equivalence loss')
        axes[0].set_xlabel('epoch')
        axes[0].set_ylabel('mean loss')
        axes[0].legend()
        for column in metric_columns:
            evaluated = records[['epoch', column]].dropna()
            axes[1].plot(evaluated['epoch'], evaluated[column], marker='o', label=column)
        axes[1].set_xlabel('epoch')
        axes[1].set_ylabel('held-out metric')
        if metric_columns:
            axes[1].legend()
        fig.tight_layout()
        return self._save_figure(fig, path)

    def plot_lambda_sweep(self, summary: pd.DataFrame, metric: str, path: Union[str, Path]) -> str:
        """Mean metric against lambda with one error-bar line per variant"""
        mean_column, std_column = f'{metric}_mean', f'{metric}_std'
        if 'lambda' not in summary.columns or mean_column not in summary.columns:
            raise ValueError(f"Summary has no lambda sweep of '{metric}'")
        fig, ax = plt.subplots(figsize=(6, 4))
        if 'variant' not in summary.columns:
            summary = summary.assign(variant='model')
        for variant, group in summary.groupby('variant'):
            group = group.sort_values('lambda')
            ax.errorbar(group['lambda'].astype(str), group[mean_column], yerr=group[std_column],
                        marker='o', capsize=3, label=str(variant))
        ax.set_xlabel('lambda')
        ax.set_ylabel(metric)
        ax.legend()
        fig.tight_layout()
        return self._save_figure(fig, path)

    def _save_figure(self, fig, path: Union[str, Path]) -> str:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(path, dpi=100)
            self.logger.info(f"Figure saved to {path}")
            return str(path)
        except OSError as e:
            self.logger.error(f"Error saving figure: {str(e)}")
            raise
        finally:
            plt.close(fig)

    def generate_html_report(self, report_data: Dict[str, Any], report_type: str = 'train') -> str:
        """
        Render a run report as HTML

        Args:
            report_data: 'title', 'config' (dict), 'summary' and 'runs' (DataFrames or record lists),
                'figures' (paths relative to the report)
            report_type: 'train' or 'verify'

        Returns:
            HTML content
        """
        template = Template(self._get_html_template(report_type))
        return template.render(**self._prepare_template_data(report_data, report_type))

    def save_html_report(self, report_data: Dict[str, Any], path: Union[str, Path],
                         report_type: str = 'train') -> str:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.generate_html_report(report_data, report_type), encoding='utf-8')
            self.logger.info(f"HTML report saved to {path}")
            return str(path)
        except OSError as e:
            self.logger.error(f"Error saving HTML report: {str(e)}")
            raise

    def _get_html_template(self, report_type: str) -> str:
        if report_type not in ('train', 'verify'):
            raise ValueError(f"Unknown report type: {report_type}")
        return """<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <title>{{ title }}</title>
    <style>
        body { font-family: 'Segoe UI', Tahoma, sans-serif; color: #333; max-width: 1100px; margin: 0 auto; padding: 20px; }
        .header { background: #2c3e50; color: white; padding: 1.5rem; border-radius: 8px; }
        .header .subtitle { opacity: 0.85; }
        .section { margin: 1.5rem 0; }
        .section h2 { border-bottom: 2px solid #3498db; padding-bottom: 0.3rem; }
        table { border-collapse: collapse; width: 100%; font-size: 0.9rem; }
        th, td { border: 1px solid #ddd; padding: 0.4rem 0.6rem; text-align: right; }
        th { background: #f0f3f6; }
        .pass { color: #1e8449; font-weight: bold; }
        .fail { color: #c0392b; font-weight: bold; }
        img { max-width: 100%; margin: 0.5rem 0; }
        code { background: #f4f4f4; padding: 0 0.2rem; }
    </style>
</head>
<body>
    <div class="header">
        <h1>{{ title }}</h1>
        <div class="subtitle">{{ report_type }} report &middot; {{ date }}</div>
    </div>

    {% if status is not none %}
    <div class="section">
        <h2>Status</h2>
        <p class="{{ 'pass' if status == 0 else 'fail' }}">{{ 'All checks passed' if status == 0 else 'Failures: ' ~ failed|join(', ') }}</p>
    </div>
    {% endif %}

    {% if config %}
    <div class="section">
        <h2>Configuration</h2>
        <table>
            {% for key, value in config %}
            <tr><th>{{ key }}</th><td><code>{{ value }}</code></td></tr>
            {% endfor %}
        </table>
    </div>
    {% endif %}

    {% for table in tables %}
    <div class="section">
        <h2>{{ table.name }}</h2>
        <table>
            <tr>{% for column in table.columns %}<th>{{ column }}</th>{% endfor %}</tr>
            {% for row in table.rows %}
            <tr>{% for cell in row %}<td>{{ cell }}</td>{% endfor %}</tr>
            {% endfor %}
        </table>
    </div>
    {% endfor %}

    {% if figures %}
    <div class="section">
        <h2>Figures</h2>
        {% for figure in figures %}
        <img src="{{ figure }}" alt="{{ figure }}">
        {% endfor %}
    </div>
    {% endif %}
</body>
</html>
"""

    def _prepare_template_data(self, report_data: Dict[str, Any], report_type: str) -> Dict[str, Any]:
        tables = []
        for name, key in (('Summary', 'summary'), ('Runs', 'runs'), ('Checks', 'checks')):
            frame = report_data.get(key)
            if frame is None:
                continue
            frame = frame if isinstance(frame, pd.DataFrame) else pd.DataFrame(list(frame))
            if frame.empty:
                continue
            tables.append({'name': name, 'columns': list(frame.columns),
                           'rows': [[_format_cell(v) for v in row] for row in frame.itertuples(index=False)]})

        checks = report_data.get('checks')
        failed: List[str] = []
        if isinstance(checks, pd.DataFrame) and 'passed' in checks.columns:
            failed = [str(s) for s in checks.loc[~checks['passed'].astype(bool), 'suite']]

        return {
            'title': report_data.get('title', 'jigsaw-mil run'),
            'report_type': report_type,
            'date': report_data.get('date', datetime.now().strftime('%Y-%m-%d %H:%M:%S')),
            'config': sorted((str(k), v) for k, v in (report_data.get('config') or {}).items()),
            'tables': tables,
            'figures': list(report_data.get('figures', [])),
            'status': report_data.get('status'),
            'failed': failed,
        }


def _format_cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return 'yes' if value else 'no'
    if isinstance(value, (float, np.floating)):
        return 'nan' if np.isnan(value) else f"{value:.4g}"
    return str(value)


def run_row(config: Dict[str, Any], metrics: Dict[str, float], fold: Optional[int] = None) -> Dict[str, Any]:
    """Summary-table row of one finished run"""
    row = {'variant': config['variant'], 'pe': config['pe_mode'], 'lambda': config['lam'],
           'seed': config['seed'], 'fold': -1 if fold is None else fold}
    row.update(metrics)
    return row
