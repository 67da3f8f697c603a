import os
workers = 1
# the font store and its face cache are shared per process
threads = int(os.environ.get("LAYERED_THREADS", "2"))
bind = f"0.0.0.0:{os.environ.get('PORT', '10000')}"
# remote composition makes five sequential model calls
timeout = int(os.environ.get("LAYERED_TIMEOUT", "300"))
