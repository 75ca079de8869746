import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'metaselect.settings')
django.setup()
