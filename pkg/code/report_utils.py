import pandas as pd


def snake_to_title(s):
    """Convert snake_case to Title Case with spaces."""
    return " ".join(word.capitalize() for word in str(s).split("_"))


def _format_value(v):
    if isinstance(v, bool):
        return "✓" if v else "✗"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def render_dict_as_bullets(d, level=0):
    """
    Recursively renders dictionary contents as plain-text bullet lists.
    Supports nested dicts and lists.
    """
    text = ""
    indent = "    " * level
    for k, v in d.items():
        title = snake_to_title(k)
        if isinstance(v, dict):
            text += f"{indent}- {title}:\n" + render_dict_as_bullets(v, level + 1)
        elif isinstance(v, (list, tuple)):
            text += f"{indent}- {title}:\n"
            for item in v:
                if isinstance(item, dict):
                    text += render_dict_as_bullets(item, level + 1)
                else:
                    text += f"{'    ' * (level + 1)}- {_format_value(item)}\n"
        else:
            text += f"{indent}- {title}: {_format_value(v)}\n"
    return text


def render_frame(frame: pd.DataFrame, decimals=None):
    """
    Aligned text rendering of a table

    Args:
        frame (pd.DataFrame): rows to render
        decimals (dict, optional): column -> digits after the point

    Returns:
        str: the table, one line per row plus a header line
    """
    frame = frame.copy()
    for column, digits in (decimals or {}).items():
        if column in frame.columns:
            frame[column] = frame[column].map(lambda x, d=digits: f"{x:.{d}f}")
    return frame.to_string(index=False)
