import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "duopolylab.settings")
django.setup()
