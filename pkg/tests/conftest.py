from voicedet._alloc import tune_allocator

tune_allocator()
