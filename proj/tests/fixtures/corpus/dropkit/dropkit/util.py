import subprocess


def git_revision():
    try:
        out = subprocess.run(['git', 'rev-parse', 'HEAD'], capture_output=True, text=True)
        return out.stdout.strip()
    except OSError:
        return 'unknown'
